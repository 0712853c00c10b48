"""Command-line surface.

Configuration comes from defaults, an optional JSON --config file, and
--section.key=value override flags, in that order. Exit codes: 1 usage /
config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, build_config, latest_checkpoint, run_directory_layout
from .errors import ConfigError, DataError, SpeechlatError

_OVERRIDE_RE = re.compile(r"^--[A-Za-z0-9_]+\.[A-Za-z0-9_.]+=.*$")

COMMANDS = ("synth-corpus", "pretrain-encoder", "train-stage1", "train-stage2",
            "encode", "decode", "reconstruct", "export-latents", "train-cfm",
            "sample", "diffusability", "probe", "eval-recon", "embed2d")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="speechlat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, **kwargs):
        sp = sub.add_parser(name, **kwargs)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--run-dir", help="run directory (overrides config)")
        sp.add_argument("--resume", action="store_true")
        return sp

    sp = cmd("synth-corpus", help="generate the synthetic corpus")
    sp.add_argument("--out", help="output directory (default <run>/corpus)")

    sp = cmd("pretrain-encoder", help="masked-prediction pretraining")
    sp.add_argument("--corpus", help="corpus dir or manifest")
    sp.add_argument("--out", help="encoder checkpoint path")

    sp = cmd("train-stage1", help="semantic compression + decoder warm-up")
    sp.add_argument("--corpus")
    sp.add_argument("--encoder", help="pretrained encoder checkpoint")

    sp = cmd("train-stage2", help="joint enrichment with semantic anchoring")
    sp.add_argument("--corpus")
    sp.add_argument("--stage1", help="stage-1 trainer checkpoint")

    sp = cmd("encode", help="waveform -> features (or latent with --latent)")
    sp.add_argument("--ckpt", required=True, help="trainer or encoder checkpoint")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--latent", action="store_true")

    sp = cmd("decode", help="latent WCUB -> waveform")
    sp.add_argument("--ckpt", required=True, help="trainer checkpoint")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)

    sp = cmd("reconstruct", help="waveform -> waveform through the pipeline")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)

    sp = cmd("export-latents", help="corpus -> latent corpus directory")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--corpus")
    sp.add_argument("--out", help="output dir (default <run>/latents)")
    sp.add_argument("--features", action="store_true",
                    help="export raw encoder features instead of latents")

    sp = cmd("train-cfm", help="train the flow-matching generator")
    sp.add_argument("--latents", required=True, help="latent corpus dir")

    sp = cmd("sample", help="sample latent sequences from a trained generator")
    sp.add_argument("--ckpt", required=True, help="generator checkpoint")
    sp.add_argument("--out", required=True)
    sp.add_argument("--classes", required=True,
                    help="comma-separated per-frame class ids")
    sp.add_argument("--steps", type=int, default=32)
    sp.add_argument("--guidance", type=float)
    sp.add_argument("--seed", type=int, default=0)

    sp = cmd("diffusability", help="raw-features vs latents flow-loss probe")
    sp.add_argument("--features", required=True, help="raw feature corpus dir")
    sp.add_argument("--latents", required=True, help="latent corpus dir")
    sp.add_argument("--out", help="report path (default <run>/reports)")
    sp.add_argument("--seeds", default="0,1,2")

    sp = cmd("probe", help="linear probe on a latent/feature corpus")
    sp.add_argument("--latents", required=True)
    sp.add_argument("--out", help="report path")

    sp = cmd("eval-recon", help="reconstruction metrics on held-out split")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--corpus")
    sp.add_argument("--out", help="report path")

    sp = cmd("embed2d", help="PCA plot data for pooled vectors")
    sp.add_argument("--latents", required=True)
    sp.add_argument("--out", required=True)
    return p


def _split_overrides(argv):
    overrides = [a[2:] for a in argv if _OVERRIDE_RE.match(a)]
    rest = [a for a in argv if not _OVERRIDE_RE.match(a)]
    return rest, overrides


def parse_cli(argv) -> tuple[argparse.Namespace, RunConfig]:
    rest, overrides = _split_overrides(list(argv))
    args = _build_parser().parse_args(rest)
    cfg = build_config(args.config, overrides)
    if args.run_dir:
        cfg.values["run_dir"] = args.run_dir
    return args, cfg


# ---- helpers ---------------------------------------------------------------


def _manifest(cfg: RunConfig, arg):
    from .corpus import CorpusManifest

    path = Path(arg) if arg else cfg.run_dir / "corpus"
    if path.is_dir():
        path = path / "manifest.jsonl"
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    return CorpusManifest.load(path)


def _model_cfg(cfg: RunConfig):
    from .training import ModelConfig

    enc, ad, dec = cfg["encoder"], cfg["adapter"], cfg["decoder"]
    return ModelConfig(
        d_s=enc["d_s"], d_z=ad["d_z"], enc_layers=enc["n_layers"],
        heads=enc["heads"], dec_hidden=dec["hidden"], n_dec=dec["n_dec"],
        n_voc=dec["n_voc"], bottleneck=ad["bottleneck"],
        frame_rate=ad["frame_rate"], sigma=ad["sigma"],
        tap_layer=ad["tap_layer"] or None, beta_kl=ad["beta_kl"])


def _stage_cfg(cfg: RunConfig, stage: int):
    from .training import StageConfig

    sec = dict(cfg["stage1" if stage == 1 else "stage2"])
    adv = sec.pop("adversarial_start_step")
    return StageConfig(stage=stage, seed=cfg.module_seed(f"stage{stage}"),
                       adversarial_start_step=None if adv < 0 else adv, **sec)


def _load_trainer_models(path):
    from .training import load_models

    cfg, mc, enc_frozen, enc_adapted, adapter, decoder = load_models(path)
    acting = enc_adapted if enc_adapted is not None else enc_frozen
    return cfg, mc, acting, enc_frozen, adapter, decoder


def _cfm_cfg(cfg: RunConfig, target_dim: int, n_classes: int):
    from .flowgen import CFMConfig

    sec = cfg["cfm"]
    return CFMConfig(
        target_dim=target_dim, width=sec["width"], depth=sec["depth"],
        heads=sec["heads"], n_classes=n_classes,
        cond_drop_prob=sec["cond_drop_prob"], guidance=sec["guidance"],
        use_prompt=sec["use_prompt"], total_steps=sec["total_steps"],
        peak_lr=sec["peak_lr"], batch_size=sec["batch_size"],
        crop_frames=sec["crop_frames"], seed=cfg.module_seed("cfm"),
        log_every=sec["log_every"])


def _pooled_corpus(items):
    from .evalsuite import pooled_segment_features

    vecs, labs = [], []
    rate = 50
    for _, frames, labels in items:
        if len(labels) > frames.shape[0] * 1.5:
            rate = 25
        v, l = pooled_segment_features(frames, labels, frame_rate=rate)
        vecs.append(v)
        labs.append(l)
    return np.concatenate(vecs), np.concatenate(labs)


# ---- command implementations ----------------------------------------------


def _run(args, cfg: RunConfig) -> int:
    from . import acoustic, adapter as adapter_mod, encoder as encoder_mod
    from .corpus import synth_corpus

    cmd = args.command

    if cmd == "synth-corpus":
        sec = cfg["corpus"]
        out = Path(args.out) if args.out else cfg.run_dir / "corpus"
        manifest = synth_corpus(out, cfg.module_seed("corpus"),
                                n_speakers=sec["n_speakers"],
                                n_classes=sec["n_classes"],
                                n_utts=sec["n_utts"],
                                dur_range=(sec["dur_lo"], sec["dur_hi"]))
        print(f"wrote {len(manifest.entries)} utterances to {out}")
        return 0

    if cmd == "pretrain-encoder":
        sec = cfg["encoder"]
        manifest = _manifest(cfg, args.corpus)
        enc = encoder_mod.build_toy_encoder(
            sec["d_s"], sec["n_layers"], cfg.module_seed("encoder"),
            sec["heads"], freeze_frontend=sec["freeze_frontend"])
        encoder_mod.pretrain_toy_encoder(
            enc, manifest, sec["pretrain_steps"], seed=cfg.module_seed("encoder"),
            batch_size=sec["batch_size"], crop_frames=sec["crop_frames"],
            lr=sec["lr"], logger=lambda r: print(json.dumps(r)))
        out = Path(args.out) if args.out else cfg.run_dir / "checkpoints" / "encoder.wcck"
        out.parent.mkdir(parents=True, exist_ok=True)
        encoder_mod.save_encoder(out, enc)
        print(f"wrote encoder checkpoint {out}")
        return 0

    if cmd in ("train-stage1", "train-stage2"):
        from .training import Trainer, build_trainer, stage2_from_stage1

        stage = 1 if cmd == "train-stage1" else 2
        manifest = _manifest(cfg, args.corpus)
        paths = run_directory_layout(cfg, resume=args.resume)
        stage_cfg = _stage_cfg(cfg, stage)
        resume_ckpt = latest_checkpoint(paths["checkpoints"]) if args.resume else None
        if resume_ckpt is not None:
            trainer = Trainer.from_checkpoint(resume_ckpt, manifest)
        elif stage == 1:
            enc = encoder_mod.load_encoder(args.encoder) if args.encoder else None
            trainer = build_trainer(stage_cfg, _model_cfg(cfg), manifest, enc)
        else:
            if not args.stage1:
                raise ConfigError("train-stage2 requires --stage1 checkpoint")
            trainer = stage2_from_stage1(args.stage1, stage_cfg, manifest)
        mode = "a" if args.resume else "w"
        with open(paths["metrics"], mode) as fh:
            trainer.train(run_dir=paths["root"], metrics_fh=fh)
        print(f"finished stage {stage} at step {trainer.step}")
        return 0

    if cmd == "encode":
        from .audio_io import load_wav
        from .containers import load_wcck, save_wcub

        w = load_wav(args.inp)
        meta, _ = load_wcck(args.ckpt)
        if meta.get("kind") == "encoder":
            enc = encoder_mod.load_encoder(args.ckpt)
            if args.latent:
                raise ConfigError("--latent needs a trainer checkpoint")
            f = encoder_mod.encode(enc, w)
            save_wcub(args.out, f.frames, f.frame_rate)
        else:
            _, mc, acting, _, adapter, _ = _load_trainer_models(args.ckpt)
            f = encoder_mod.encode(acting, w, layer=mc.tap_layer)
            if args.latent:
                z = adapter_mod.compress(adapter, f)
                save_wcub(args.out, z.frames, z.frame_rate)
            else:
                save_wcub(args.out, f.frames, f.frame_rate)
        print(f"wrote {args.out}")
        return 0

    if cmd == "decode":
        from .audio_io import save_wav
        from .containers import load_wcub

        _, _, _, _, _, decoder = _load_trainer_models(args.ckpt)
        frames, frame_rate = load_wcub(args.inp)
        z = adapter_mod.Latent(frames, frame_rate)
        w = acoustic.decode(decoder, z)
        save_wav(args.out, w)
        print(f"wrote {args.out}")
        return 0

    if cmd == "reconstruct":
        from .audio_io import load_wav, save_wav

        _, mc, acting, _, adapter, decoder = _load_trainer_models(args.ckpt)
        w = load_wav(args.inp)
        f = encoder_mod.encode(acting, w, layer=mc.tap_layer)
        z = adapter_mod.compress(adapter, f)
        y = acoustic.decode(decoder, z)
        save_wav(args.out, y)
        print(f"wrote {args.out}")
        return 0

    if cmd == "export-latents":
        from .audio_io import load_wav
        from .flowgen import save_latent_corpus

        _, mc, acting, _, adapter, _ = _load_trainer_models(args.ckpt)
        manifest = _manifest(cfg, args.corpus)
        out = Path(args.out) if args.out else cfg.run_dir / "latents"
        items = []
        for e in manifest.entries:
            w = load_wav(manifest.wav_path(e))
            f = encoder_mod.encode(acting, w, layer=mc.tap_layer)
            if args.features:
                items.append((e.id, f.frames, e.classes[:len(f)]))
            else:
                z = adapter_mod.compress(adapter, f)
                labels = e.classes[::50 // z.frame_rate][:len(z)]
                items.append((e.id, z.frames, labels))
        rate = 50 if args.features else adapter.frame_rate
        save_latent_corpus(out, items, frame_rate=rate)
        print(f"wrote {len(items)} sequences to {out}")
        return 0

    if cmd == "train-cfm":
        from .flowgen import load_latent_corpus, train_cfm

        items = load_latent_corpus(args.latents)
        n_classes = 1 + max(max(lab) for _, _, lab in items)
        run_cfg = _cfm_cfg(cfg, items[0][1].shape[1], n_classes)
        paths = run_directory_layout(cfg, resume=args.resume)
        with open(paths["metrics"], "a" if args.resume else "w") as fh:
            train_cfm(run_cfg, items, run_dir=paths["root"], metrics_fh=fh)
        print(f"finished CFM training at step {run_cfg.total_steps}")
        return 0

    if cmd == "sample":
        from .containers import save_wcub
        from .flowgen import load_cfm_checkpoint, sample

        model, gen_cfg = load_cfm_checkpoint(args.ckpt)
        classes = [int(c) for c in args.classes.split(",")]
        cond = torch.tensor([classes], dtype=torch.long)
        g = torch.Generator()
        g.manual_seed(args.seed)
        x = sample(model, cond, args.steps,
                   guidance=args.guidance, generator=g)[0]
        save_wcub(args.out, x, 50)
        print(f"wrote {args.out}")
        return 0

    if cmd == "diffusability":
        from .flowgen import (diffusability_probe, load_latent_corpus,
                              strip_probe_report)

        items_raw = load_latent_corpus(args.features)
        items_latent = load_latent_corpus(args.latents)
        n_classes = 1 + max(max(lab) for _, _, lab in items_latent)
        run_cfg = _cfm_cfg(cfg, items_latent[0][1].shape[1], n_classes)
        seeds = tuple(int(s) for s in args.seeds.split(","))
        report = diffusability_probe(items_raw, items_latent, run_cfg, seeds=seeds)
        out = Path(args.out) if args.out else cfg.run_dir / "reports" / "diffusability.json"
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            json.dump(strip_probe_report(report), fh, indent=2)
        print(f"verdict: {report['verdict']} "
              f"(latent wins {report['latent_wins']}/{len(seeds)}); wrote {out}")
        return 0

    if cmd == "probe":
        from .evalsuite import linear_probe
        from .flowgen import load_latent_corpus

        items = load_latent_corpus(args.latents)
        vecs, labs = _pooled_corpus(items)
        acc = linear_probe(vecs, labs, seed=cfg.seed)
        print(f"linear probe accuracy: {acc:.4f}")
        if args.out:
            with open(args.out, "w") as fh:
                json.dump({"probe_accuracy": acc, "n_vectors": len(labs)}, fh)
        return 0

    if cmd == "eval-recon":
        from .evalsuite import eval_reconstruction, train_reference_classifiers

        manifest = _manifest(cfg, args.corpus)
        _, mc, acting, frozen, adapter, decoder = _load_trainer_models(args.ckpt)
        ref = train_reference_classifiers(
            manifest, seed=cfg.module_seed("eval"),
            steps=cfg["eval"]["ref_clf_steps"])
        max_utts = cfg["eval"]["max_utts"] or None
        report = eval_reconstruction(
            acting, adapter, decoder, manifest, ref, seed=cfg.seed,
            config_hash=cfg.hash(), encoder_frozen=frozen,
            tap_layer=mc.tap_layer, max_utts=max_utts)
        out = Path(args.out) if args.out else cfg.run_dir / "reports" / "eval_recon.json"
        out.parent.mkdir(parents=True, exist_ok=True)
        report.save(out)
        print(f"{'metric':<24}{'value':>10}")
        for key in sorted(report.metrics):
            print(f"{key:<24}{report.metrics[key]:>10.4f}")
        print(f"wrote {out}")
        return 0

    if cmd == "embed2d":
        from .evalsuite import embed_2d, write_plot_data
        from .flowgen import load_latent_corpus

        items = load_latent_corpus(args.latents)
        vecs, labs = _pooled_corpus(items)
        coords = embed_2d(vecs)
        write_plot_data(args.out, [str(i) for i in range(len(labs))], coords, labs)
        print(f"wrote {args.out}")
        return 0

    raise ConfigError(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args, cfg = parse_cli(argv)
        return _run(args, cfg)
    except SpeechlatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
