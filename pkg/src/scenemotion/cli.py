"""Command-line surface: data generation, training, sampling, evaluation,
and the ablation grid.

Exit codes: 0 success, 1 usage error, 2 data error, 3 checkpoint error.
Every command that writes outputs also writes a reproducibility record
(config, seed, checkpoint hashes) next to them.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from .config import RunConfig, load_config, save_config
from .corpus import Dataset, WindowSet, build_windows, fit_stats, load_dataset, periodic_feature_windows
from .datagen import CorpusSpec, generate_synthetic_corpus
from .diffusion import Denoiser, make_schedule, train_denoiser
from .guidance import GuidanceConfig, penetration_loss
from .io import (
    CheckpointError,
    DataFileError,
    load_checkpoint,
    load_motion,
    load_scene,
    save_checkpoint,
    save_motion,
    write_run_record,
)
from .kinematics import MotionSequence, default_skeleton
from .metrics import foot_skate, jitter, mpjpe, mpjre, mpjve, per_part_pe
from .pae import PeriodicAutoencoder, train_pae
from .prior import MotionPrior, train_prior
from .sampler import ModelBundle, crop_center, estimate_long_sequence, estimate_motion
from .scene import ScenePointCloud, ScenePointEncoder, crop_bounding_box
from .signals import SignalStats, SparseSignals, extract_sparse_signals


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _guidance_config(cfg: RunConfig) -> GuidanceConfig:
    return GuidanceConfig(
        alpha=cfg.penetration_weight,
        beta=cfg.phase_weight,
        eta=cfg.guidance_step_size,
        contact_radius_m=cfg.contact_radius_m,
        knn_neighbors=cfg.knn_neighbors,
    )


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    return cfg


def _pae_arch(cfg: RunConfig) -> dict:
    return dict(
        channels=cfg.phase_channels, window_frames=cfg.window_frames,
        kernel=cfg.pae_kernel, fps=cfg.fps,
    )


def train_pae_pair(windows: WindowSet, cfg: RunConfig):
    """Train the upper-signal PAE and its lower-body twin; returns modules + stats."""
    stats = fit_stats(windows)
    norm_upper = (windows.signals - stats.mean) / stats.std
    norm_anchor = (windows.anchors - stats.mean) / stats.std
    common = dict(
        window_frames=cfg.window_frames, channels=cfg.phase_channels, kernel=cfg.pae_kernel,
        lr=cfg.learning_rate, batch_size=cfg.batch_size, steps=cfg.pae_train_steps,
    )
    upper, upper_hist = train_pae(norm_upper, seed=cfg.seed, **common)
    upper.fps = cfg.fps
    if cfg.share_anchor_pae:
        anchor, anchor_hist = upper, upper_hist
    else:
        anchor, anchor_hist = train_pae(norm_anchor, seed=cfg.seed + 1, **common)
        anchor.fps = cfg.fps
    return upper, anchor, stats, {"upper": upper_hist, "anchor": anchor_hist}


def _save_pae_checkpoint(path, cfg, upper, anchor, stats):
    save_checkpoint(
        path, "pae", cfg,
        {
            "arch": _pae_arch(cfg),
            "upper": upper.state_dict(),
            "anchor": anchor.state_dict(),
            "shared": cfg.share_anchor_pae,
            "stats_mean": stats.mean,
            "stats_std": stats.std,
        },
    )


def load_pae_checkpoint(path, cfg):
    state = load_checkpoint(path, "pae", cfg)
    arch = state["arch"]
    upper = PeriodicAutoencoder(**arch)
    upper.load_state_dict(state["upper"])
    upper.eval()
    if state["shared"]:
        anchor = upper
    else:
        anchor = PeriodicAutoencoder(**arch)
        anchor.load_state_dict(state["anchor"])
        anchor.eval()
    stats = SignalStats(state["stats_mean"], state["stats_std"])
    return upper, anchor, stats


def load_prior_checkpoint(path, cfg):
    state = load_checkpoint(path, "prior", cfg)
    prior = MotionPrior(**state["arch"])
    prior.load_state_dict(state["state"])
    prior.eval()
    return prior


def load_denoiser_checkpoint(path, cfg):
    state = load_checkpoint(path, "denoiser", cfg)
    denoiser = Denoiser(**state["arch"])
    denoiser.load_state_dict(state["state"])
    denoiser.eval()
    encoder = None
    if state["scene_encoder"] is not None:
        encoder = ScenePointEncoder()
        encoder.load_state_dict(state["scene_encoder"])
        encoder.eval()
    return denoiser, encoder


def _cmd_gen_data(args):
    cfg = _load_cfg(args)
    spec = CorpusSpec(
        num_scenes=args.scenes,
        sequences_per_scene=args.sequences_per_scene,
        frames_per_sequence=args.frames,
    )
    manifest = generate_synthetic_corpus(args.out, spec, seed=cfg.seed, fps=cfg.fps)
    save_config(cfg, Path(args.out) / "config_used.cfg")
    write_run_record(args.out, cfg, cfg.seed, {}, extra={"command": "gen-data"})
    n_seqs = sum(len(s["sequences"]) for s in manifest["scenes"])
    print(f"generated {len(manifest['scenes'])} scenes, {n_seqs} sequences under {args.out}")
    return 0


def _cmd_train_pae(args):
    cfg = _load_cfg(args)
    ds = load_dataset(args.data)
    windows = build_windows(
        ds, ds.split("train"), cfg.window_frames, cfg.crop_size_m,
        canonicalize=cfg.canonicalize_signals,
    )
    upper, anchor, stats, hist = train_pae_pair(windows, cfg)
    _save_pae_checkpoint(args.out, cfg, upper, anchor, stats)
    write_run_record(Path(args.out).parent, cfg, cfg.seed, {"pae": args.out}, extra={"command": "train-pae"})
    print(f"trained PAE pair on {len(windows)} windows; final recon loss {hist['upper'][-1]:.4f}")
    return 0


def _cmd_train_prior(args):
    cfg = _load_cfg(args)
    ds = load_dataset(args.data)
    windows = build_windows(
        ds, ds.split("train"), cfg.window_frames, cfg.crop_size_m,
        canonicalize=cfg.canonicalize_signals,
    )
    stats = fit_stats(windows)
    prior, hist = train_prior(
        windows.motions, windows.signals, ds.skeleton,
        stats=stats, d_model=cfg.d_model, layers=cfg.prior_layers, heads=cfg.attention_heads,
        window_frames=cfg.window_frames, lr=cfg.learning_rate, batch_size=cfg.batch_size,
        steps=cfg.prior_train_steps, kl_weight=cfg.kl_weight, recon_weight=cfg.recon_weight,
        geometric_weight=cfg.geometric_weight, seed=cfg.seed,
    )
    arch = dict(
        d_model=cfg.d_model, layers=cfg.prior_layers, heads=cfg.attention_heads,
        window_frames=cfg.window_frames,
    )
    save_checkpoint(args.out, "prior", cfg, {"arch": arch, "state": prior.state_dict()})
    write_run_record(Path(args.out).parent, cfg, cfg.seed, {"prior": args.out}, extra={"command": "train-prior"})
    print(f"trained prior on {len(windows)} windows; final recon {hist['recon'][-1]:.4f}")
    return 0


def train_denoiser_variant(windows: WindowSet, ds: Dataset, cfg: RunConfig, upper_pae, stats,
                           use_scene: bool, use_pae: bool, seed: int):
    periodic = periodic_feature_windows(upper_pae, windows.signals, stats)
    schedule = make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    denoiser, encoder, hist = train_denoiser(
        windows.motions, windows.signals, periodic, windows.crops, ds.skeleton, schedule,
        stats=stats, d_model=cfg.d_model, layers=cfg.denoiser_layers, heads=cfg.attention_heads,
        window_frames=cfg.window_frames, use_scene=use_scene, use_pae=use_pae,
        lr=cfg.learning_rate, batch_size=cfg.batch_size, steps=cfg.denoiser_train_steps, seed=seed,
    )
    return denoiser, encoder, hist


def _denoiser_state(cfg, denoiser, encoder, use_scene, use_pae):
    arch = dict(
        d_model=cfg.d_model, layers=cfg.denoiser_layers, heads=cfg.attention_heads,
        window_frames=cfg.window_frames, use_scene=use_scene, use_pae=use_pae,
    )
    return {
        "arch": arch,
        "state": denoiser.state_dict(),
        "scene_encoder": encoder.state_dict() if encoder is not None else None,
    }


def _cmd_train_denoiser(args):
    cfg = _load_cfg(args)
    ds = load_dataset(args.data)
    upper_pae, _, stats = load_pae_checkpoint(args.pae, cfg)
    windows = build_windows(
        ds, ds.split("train"), cfg.window_frames, cfg.crop_size_m,
        canonicalize=cfg.canonicalize_signals,
    )
    use_scene, use_pae = not args.no_scene, not args.no_pae
    denoiser, encoder, hist = train_denoiser_variant(
        windows, ds, cfg, upper_pae, stats, use_scene, use_pae, cfg.seed
    )
    save_checkpoint(args.out, "denoiser", cfg, _denoiser_state(cfg, denoiser, encoder, use_scene, use_pae))
    write_run_record(
        Path(args.out).parent, cfg, cfg.seed, {"denoiser": args.out, "pae": args.pae},
        extra={"command": "train-denoiser"},
    )
    print(f"trained denoiser on {len(windows)} windows; final simple loss {hist['simple'][-1]:.4f}")
    return 0


def _make_bundle(cfg, skeleton, pae_path, prior_path, denoiser_path):
    upper, anchor, stats = load_pae_checkpoint(pae_path, cfg)
    prior = load_prior_checkpoint(prior_path, cfg)
    denoiser, encoder = load_denoiser_checkpoint(denoiser_path, cfg)
    return ModelBundle(
        skeleton=skeleton, prior=prior, denoiser=denoiser, scene_encoder=encoder,
        upper_pae=upper, anchor_pae=anchor, stats=stats, fps=cfg.fps,
        canonicalize=cfg.canonicalize_signals,
    )


def _cmd_sample(args):
    cfg = _load_cfg(args)
    motion, skeleton = load_motion(args.motion)
    cloud, _ = load_scene(args.scene)
    bundle = _make_bundle(cfg, skeleton, args.pae, args.prior, args.denoiser)
    signals = extract_sparse_signals(skeleton, motion)
    schedule = make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    gcfg = _guidance_config(cfg)
    if args.no_penetration:
        gcfg = GuidanceConfig(
            alpha=0.0, beta=gcfg.beta, eta=gcfg.eta,
            contact_radius_m=gcfg.contact_radius_m, knn_neighbors=gcfg.knn_neighbors,
        )
    if args.no_phase:
        gcfg = GuidanceConfig(
            alpha=gcfg.alpha, beta=0.0, eta=gcfg.eta,
            contact_radius_m=gcfg.contact_radius_m, knn_neighbors=gcfg.knn_neighbors,
        )
    estimator = estimate_motion if motion.num_frames == cfg.window_frames else estimate_long_sequence
    est = estimator(
        signals, cloud, bundle, schedule, gcfg, seed=cfg.seed,
        noise_prior_sample=cfg.noise_prior_sample,
    )
    save_motion(args.out, est, skeleton)
    write_run_record(
        Path(args.out).parent, cfg, cfg.seed,
        {"pae": args.pae, "prior": args.prior, "denoiser": args.denoiser},
        extra={"command": "sample", "motion": str(args.motion), "scene": str(args.scene)},
    )
    print(f"wrote {args.out} ({est.num_frames} frames)")
    return 0


def penetration_summary(motion: MotionSequence, skeleton, cloud, cfg: RunConfig):
    """Per-window crop penetration loss and contact-violation count."""
    gcfg = _guidance_config(cfg)
    n = cfg.window_frames
    total, count, frames = 0.0, 0, 0
    starts = range(0, max(motion.num_frames - n, 0) + 1, n) if motion.num_frames >= n else [0]
    from .kinematics import fk_positions

    for s in starts:
        end = min(s + n, motion.num_frames)
        window = MotionSequence(
            motion.root_translation[s:end], motion.local_rotations[s:end], fps=motion.fps
        )
        sig = extract_sparse_signals(skeleton, window)
        crop = crop_bounding_box(cloud, crop_center(sig), size_m=cfg.crop_size_m)
        loss = penetration_loss(window, skeleton, crop, gcfg)
        total += loss.item()
        pos = fk_positions(skeleton, window.local_rotations, window.root_translation)
        joints = pos[:, list(gcfg.contact_joints)].detach().numpy().reshape(-1, 3)
        d, _ = crop.kdtree().query(joints, k=1)
        count += int((d < gcfg.contact_radius_m).sum())
        frames += end - s
    return total, count, frames


METRIC_COLUMNS = ("MPJRE", "MPJPE", "MPJVE", "Jitter", "FS", "HandPE", "UpperPE", "LowerPE")


def evaluate_pair(pred: MotionSequence, gt: MotionSequence, skeleton, cfg: RunConfig) -> dict:
    return {
        "MPJRE": mpjre(pred, gt),
        "MPJPE": mpjpe(pred, gt, skeleton),
        "MPJVE": mpjve(pred, gt, skeleton, cfg.fps),
        "Jitter": jitter(pred, skeleton, cfg.fps),
        "FS": foot_skate(
            pred, skeleton, cfg.fps, contact_height=cfg.contact_height_m,
            contact_speed=cfg.contact_speed_mps,
        ),
        "HandPE": per_part_pe(pred, gt, skeleton, "hands"),
        "UpperPE": per_part_pe(pred, gt, skeleton, "upper"),
        "LowerPE": per_part_pe(pred, gt, skeleton, "lower"),
    }


def _print_metric_table(rows: list, labels: list):
    header = "  ".join(f"{c:>8}" for c in ("row",) + METRIC_COLUMNS)
    print(header)
    for label, row in zip(labels, rows):
        print("  ".join([f"{label:>8}"] + [f"{row[c]:8.3f}" for c in METRIC_COLUMNS]))


def _cmd_eval(args):
    cfg = _load_cfg(args)
    pred, skeleton = load_motion(args.pred)
    gt, _ = load_motion(args.gt)
    row = evaluate_pair(pred, gt, skeleton, cfg)
    _print_metric_table([row], ["eval"])
    if args.scene:
        cloud, _ = load_scene(args.scene)
        total, count, frames = penetration_summary(pred, skeleton, cloud, cfg)
        print(f"penetration: loss {total:.6f}, {count} contact-joint frames in violation over {frames} frames")
    return 0


def _combo_rows(components, losses):
    comp_names = [c.strip() for c in components.split(",") if c.strip()] if components else []
    loss_names = [c.strip() for c in losses.split(",") if c.strip()] if losses else []
    valid_c, valid_l = {"mp", "scene", "pae"}, {"penetration", "phase"}
    if not set(comp_names) <= valid_c:
        raise ValueError(f"components must be among {sorted(valid_c)}")
    if not set(loss_names) <= valid_l:
        raise ValueError(f"losses must be among {sorted(valid_l)}")
    rows = []
    for bits in range(2 ** len(comp_names)):
        comp = {name: bool(bits >> i & 1) for i, name in enumerate(comp_names)}
        for lbits in range(2 ** len(loss_names)):
            loss = {name: bool(lbits >> i & 1) for i, name in enumerate(loss_names)}
            row = {"mp": True, "scene": True, "pae": True, "penetration": True, "phase": True}
            row.update(comp)
            row.update(loss)
            rows.append(row)
    return rows


def _cmd_ablate(args):
    cfg = _load_cfg(args)
    ds = load_dataset(args.data)
    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    rows = _combo_rows(args.components, args.losses)

    train_windows = build_windows(ds, ds.split("train"), cfg.window_frames, cfg.crop_size_m)
    test_windows = build_windows(ds, ds.split("test"), cfg.window_frames, cfg.crop_size_m,
                                 stride=cfg.window_frames)
    limit = min(args.test_windows, len(test_windows))

    pae_path = work / "pae.pt"
    if not pae_path.exists():
        upper, anchor, stats, _ = train_pae_pair(train_windows, cfg)
        _save_pae_checkpoint(pae_path, cfg, upper, anchor, stats)
    upper, anchor, stats = load_pae_checkpoint(pae_path, cfg)

    prior_path = work / "prior.pt"
    if not prior_path.exists():
        prior, _ = train_prior(
            train_windows.motions, train_windows.signals, ds.skeleton, stats=stats,
            d_model=cfg.d_model, layers=cfg.prior_layers, heads=cfg.attention_heads,
            window_frames=cfg.window_frames, lr=cfg.learning_rate, batch_size=cfg.batch_size,
            steps=cfg.prior_train_steps, kl_weight=cfg.kl_weight, recon_weight=cfg.recon_weight,
            geometric_weight=cfg.geometric_weight, seed=cfg.seed,
        )
        arch = dict(d_model=cfg.d_model, layers=cfg.prior_layers, heads=cfg.attention_heads,
                    window_frames=cfg.window_frames)
        save_checkpoint(prior_path, "prior", cfg, {"arch": arch, "state": prior.state_dict()})
    prior = load_prior_checkpoint(prior_path, cfg)

    def denoiser_for(use_scene, use_pae):
        path = work / f"denoiser_scene{int(use_scene)}_pae{int(use_pae)}.pt"
        if not path.exists():
            den, enc, _ = train_denoiser_variant(
                train_windows, ds, cfg, upper, stats, use_scene, use_pae, cfg.seed
            )
            save_checkpoint(path, "denoiser", cfg, _denoiser_state(cfg, den, enc, use_scene, use_pae))
        return load_denoiser_checkpoint(path, cfg)

    schedule = make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    results, labels = [], []
    for row in rows:
        denoiser, encoder = denoiser_for(row["scene"], row["pae"])
        bundle = ModelBundle(
            skeleton=ds.skeleton, prior=prior, denoiser=denoiser, scene_encoder=encoder,
            upper_pae=upper, anchor_pae=anchor, stats=stats, fps=cfg.fps,
        )
        gcfg = GuidanceConfig(
            alpha=cfg.penetration_weight if row["penetration"] else 0.0,
            beta=cfg.phase_weight if row["phase"] else 0.0,
            eta=cfg.guidance_step_size,
            contact_radius_m=cfg.contact_radius_m,
            knn_neighbors=cfg.knn_neighbors,
        )
        agg = {c: 0.0 for c in METRIC_COLUMNS}
        for i in range(limit):
            gt = MotionSequence.from_tensor(test_windows.motions[i], fps=cfg.fps)
            sig = SparseSignals(test_windows.signals[i])
            cloud = ScenePointCloud(test_windows.crops[i] + sig.values[0, 6:9])
            est = estimate_motion(
                sig, cloud, bundle, schedule, gcfg, seed=cfg.seed + i,
                use_prior=row["mp"],
            )
            m = evaluate_pair(est, gt, ds.skeleton, cfg)
            for c in METRIC_COLUMNS:
                agg[c] += m[c] / limit
        results.append(agg)
        labels.append(
            f"{int(row['mp'])}{int(row['scene'])}{int(row['pae'])}"
            f"|{int(row['penetration'])}{int(row['phase'])}"
        )
    print("row key: mp/scene/pae | penetration/phase (1 = enabled)")
    _print_metric_table(results, labels)
    write_run_record(work, cfg, cfg.seed, {"pae": pae_path, "prior": prior_path},
                     extra={"command": "ablate", "rows": len(rows)})
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="scenemotion", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="flat key = value config file")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")

    g = sub.add_parser("gen-data", help="generate the synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=25)
    g.add_argument("--sequences-per-scene", type=int, default=16)
    g.add_argument("--frames", type=int, default=360)
    common(g)
    g.set_defaults(func=_cmd_gen_data)

    tp = sub.add_parser("train-pae", help="train the periodic autoencoder pair")
    tp.add_argument("--data", required=True)
    tp.add_argument("--out", required=True)
    common(tp)
    tp.set_defaults(func=_cmd_train_pae)

    tr = sub.add_parser("train-prior", help="train the VAE motion prior")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    common(tr)
    tr.set_defaults(func=_cmd_train_prior)

    td = sub.add_parser("train-denoiser", help="train the conditional denoiser")
    td.add_argument("--data", required=True)
    td.add_argument("--pae", required=True)
    td.add_argument("--out", required=True)
    td.add_argument("--no-scene", action="store_true", help="drop the scene condition")
    td.add_argument("--no-pae", action="store_true", help="drop the periodic feature condition")
    common(td)
    td.set_defaults(func=_cmd_train_denoiser)

    s = sub.add_parser("sample", help="estimate full-body motion for one clip")
    s.add_argument("--motion", required=True, help="motion file providing the tracking signals")
    s.add_argument("--scene", required=True)
    s.add_argument("--pae", required=True)
    s.add_argument("--prior", required=True)
    s.add_argument("--denoiser", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-penetration", action="store_true")
    s.add_argument("--no-phase", action="store_true")
    common(s)
    s.set_defaults(func=_cmd_sample)

    e = sub.add_parser("eval", help="metric table for a predicted vs ground-truth pair")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--scene", default=None, help="adds a penetration summary")
    common(e)
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", help="toggle components/losses and print a row per combo")
    a.add_argument("--data", required=True)
    a.add_argument("--workdir", required=True)
    a.add_argument("--components", default="", help="comma list among mp,scene,pae")
    a.add_argument("--losses", default="", help="comma list among penetration,phase")
    a.add_argument("--test-windows", type=int, default=16)
    common(a)
    a.set_defaults(func=_cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 3
    except (DataFileError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
