"""Command-line entry points: serve, synth, simulate and the analyses."""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import interaction_log, metrics, nifti, sim_annotator
from .unet3d import NetworkConfig
from .volume_io import load_volume, save_volume


def _parse_dims(text: str) -> tuple:
    parts = tuple(int(p) for p in text.split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated dims, got {text!r}")
    return parts


def _network_from_args(args) -> NetworkConfig:
    overrides = {}
    overrides.update(getattr(args, "scenario_network", None) or {})
    if getattr(args, "network_config", None):
        overrides.update(json.loads(Path(args.network_config).read_text()))
    for name in ("base_features", "levels", "patch_dims", "groupnorm_groups", "learning_rate"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if "downsample" in overrides:
        overrides["downsample"] = tuple(tuple(d) for d in overrides["downsample"])
    if "levels" in overrides and "downsample" not in overrides:
        overrides["downsample"] = tuple((2, 2, 2) for _ in range(overrides["levels"] - 1))
    return NetworkConfig(**overrides)


def cmd_serve(args) -> int:
    import uvicorn

    from .server import ServiceConfig, TrainingService, create_app

    root = Path(args.root)
    if not root.is_dir():
        print(f"error: data directory {root} does not exist", file=sys.stderr)
        return 1
    if args.config:
        config = ServiceConfig.from_file(args.config, root=root)
    else:
        config = ServiceConfig(root=root, network=_network_from_args(args))
    config.restart_enabled = not args.no_restart
    config.auto_train = not args.no_auto_train
    config.seed = args.seed
    if args.watch_dir:
        config.watch_dir = Path(args.watch_dir)
    service = TrainingService(config)
    if config.watch_dir is not None:
        service.start_watcher()
    app = create_app(service)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def cmd_synth(args) -> int:
    root = Path(args.out)
    volumes_dir = root / "data" / "volumes"
    truth_dir = Path(args.truth_dir) if args.truth_dir else root / "truth"
    dataset = sim_annotator.make_synthetic_dataset(args.count, args.dims, args.seed)
    ids = []
    for volume, truth in dataset:
        save_volume(volume, volumes_dir / f"{volume.id}.nii.gz")
        nifti.write(truth_dir / f"{volume.id}.nii.gz", truth.astype(np.uint8), spacing=volume.spacing)
        if args.with_dose:
            dose = sim_annotator.make_synthetic_dose(truth, seed=args.seed + len(ids))
            nifti.write(root / "dose" / f"{volume.id}.nii.gz", dose, spacing=volume.spacing)
        ids.append(volume.id)
    manifest = {"ids": ids, "dims": list(args.dims), "seed": args.seed}
    (root / "synth_manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(ids)} volumes under {volumes_dir}")
    return 0


def _load_dataset(volumes_dir: Path, truth_dir: Path):
    dataset = []
    for path in sorted(volumes_dir.glob("*.nii*")):
        volume = load_volume(path)
        truth_path = truth_dir / f"{volume.id}.nii.gz"
        if not truth_path.exists():
            truth_path = truth_dir / f"{volume.id}.nii"
        truth, _, _ = nifti.read(truth_path)
        dataset.append((volume, truth != 0))
    return dataset


def cmd_simulate(args) -> int:
    # scenario file supplies defaults; explicit flags override it
    scenario = json.loads(Path(args.scenario).read_text()) if args.scenario else {}
    parser_defaults = {
        "fraction": 1.0, "policy": "largest_components_first", "seed": 0,
        "margin": 8, "epochs_per_image": 2, "pacing": "step",
    }

    def setting(name, key=None):
        value = getattr(args, name)
        if value != parser_defaults[name]:
            return value
        return scenario.get(key or name, value)

    oracle_cfg = sim_annotator.OracleConfig(
        correction_fraction=setting("fraction", "correction_fraction"),
        component_policy=setting("policy", "component_policy"),
        seed=setting("seed"),
        box_margin=setting("margin", "box_margin"),
    )
    session_cfg = sim_annotator.SessionConfig(
        epochs_per_image=setting("epochs_per_image"),
        pacing=setting("pacing"),
        save_masks_dir=Path(args.save_masks) if args.save_masks else None,
    )
    if "network" in scenario and not args.network_config:
        overrides = dict(scenario["network"])
        if "downsample" in overrides:
            overrides["downsample"] = tuple(tuple(d) for d in overrides["downsample"])
        args.scenario_network = overrides
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    root = Path(args.root)
    dataset = _load_dataset(root / "data" / "volumes", Path(args.truth_dir or root / "truth"))
    if not dataset:
        print("error: no volumes found to simulate on", file=sys.stderr)
        return 1

    if args.server_url:
        import httpx

        http = httpx.Client(base_url=args.server_url, timeout=args.timeout)
        client = sim_annotator.ServerClient(http)
        rows = sim_annotator.run_session(dataset, client, oracle_cfg, session_cfg)
    else:
        from fastapi.testclient import TestClient

        from .server import ServiceConfig, TrainingService, create_app

        config = ServiceConfig(
            root=root,
            network=_network_from_args(args),
            restart_enabled=not args.no_restart,
            auto_train=args.pacing == "poll",
            seed=args.seed,
        )
        service = TrainingService(config)
        with TestClient(create_app(service)) as http:
            client = sim_annotator.ServerClient(http)
            rows = sim_annotator.run_session(dataset, client, oracle_cfg, session_cfg)
        service.close()
    report_path = out_dir / "report.csv"
    sim_annotator.write_report(report_path, rows)
    end = max(r["timestamp"] for r in rows) + 3600.0
    (out_dir / "periods.json").write_text(json.dumps([{"start": 0.0, "stop": end}]))
    print(f"wrote {report_path} ({len(rows)} rows)")
    return 0


def _plot(path, draw):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4.5))
    draw(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_analyze_dice(args) -> int:
    rows = sim_annotator.read_report(args.report)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    values = [r["dice_pred_corrected"] for r in rows]
    ids = [r["volume_id"] for r in rows]
    means, stds = metrics.running_stats(values, window=args.window)
    metrics.write_series_csv(out_dir / "dice_vs_order.csv", zip(range(len(values)), ids, values))
    metrics.write_series_csv(out_dir / "dice_running_mean.csv", zip(range(len(values)), ids, means))

    def draw(ax):
        x = np.arange(len(values))
        ax.scatter(x, values, s=12, alpha=0.6, label="dice(pred, corrected)")
        ax.plot(x, means, color="tab:red", label=f"running mean ({args.window})")
        ax.fill_between(x, means - stds, means + stds, color="tab:red", alpha=0.2)
        ax.set_xlabel("image (delineation order)")
        ax.set_ylabel("dice")
        ax.set_ylim(0.0, 1.05)
        ax.legend()

    _plot(out_dir / "dice_vs_order.png", draw)
    print(f"wrote dice analysis to {out_dir}")
    return 0


def cmd_analyze_durations(args) -> int:
    events = interaction_log.read_events(args.events)
    periods = None
    if args.periods:
        raw = json.loads(Path(args.periods).read_text())
        periods = [interaction_log.AnnotationPeriod(p["start"], p["stop"]) for p in raw]
    totals = interaction_log.durations(events, periods, inactivity_threshold=args.threshold)
    order = []
    for event in events:
        if event.kind == "open_file" and event.volume_id in totals and event.volume_id not in order:
            order.append(event.volume_id)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series = [(i, vid, totals[vid]) for i, vid in enumerate(order)]
    metrics.write_series_csv(out_dir / "durations.csv", series)

    def draw(ax):
        ax.plot([s[0] for s in series], [s[2] for s in series], marker="o", ms=3, lw=1)
        ax.set_xlabel("image (delineation order)")
        ax.set_ylabel("annotation seconds")

    _plot(out_dir / "durations_vs_order.png", draw)
    print(f"wrote duration analysis to {out_dir}")
    return 0


def dose_bands(values, lower: float = 0.25, upper: float = 1.0) -> list[dict]:
    """Percentage of images per contiguous third with deviation in
    [lower, upper] and above upper."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    bounds = [0, round(n / 3), round(2 * n / 3), n]
    groups = []
    for g in range(3):
        chunk = values[bounds[g] : bounds[g + 1]]
        count = len(chunk)
        in_band = int(((chunk >= lower) & (chunk <= upper)).sum())
        over = int((chunk > upper).sum())
        groups.append(
            {
                "group": g + 1,
                "start_index": bounds[g],
                "end_index": bounds[g + 1] - 1,
                "count": count,
                "pct_mid_band": 100.0 * in_band / count if count else 0.0,
                "pct_over": 100.0 * over / count if count else 0.0,
            }
        )
    return groups


def cmd_analyze_dose(args) -> int:
    if args.diffs:
        series = metrics.read_series_csv(args.diffs)
    else:
        if not (args.dose_dir and args.pred_dir and args.cor_dir):
            print("error: need --diffs or all of --dose-dir/--pred-dir/--cor-dir", file=sys.stderr)
            return 1
        series = []
        pred_dir = Path(args.pred_dir)
        for index, path in enumerate(sorted(Path(args.dose_dir).glob("*.nii*"))):
            from .volume_io import volume_id_from_path

            volume_id = volume_id_from_path(path)
            grid, _, _ = nifti.read(path)
            dose = metrics.DoseMatrix(grid, volume_id)
            pred, _, _ = nifti.read(pred_dir / path.name)
            cor, _, _ = nifti.read(Path(args.cor_dir) / path.name)
            if not pred.any() or not cor.any():
                continue
            series.append((index, volume_id, metrics.dose_abs_diff(dose, pred != 0, cor != 0)))

    if not series:
        print("error: no dose deviations to analyze", file=sys.stderr)
        return 1
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    values = [v for _, _, v in series]
    ids = [vid for _, vid, _ in series]
    smoothed = metrics.gaussian_running_mean(values, bandwidth=args.bandwidth)
    metrics.write_series_csv(out_dir / "dose_diffs.csv", series)
    metrics.write_series_csv(out_dir / "dose_smoothed.csv", zip(range(len(values)), ids, smoothed))
    groups = dose_bands(values)
    with open(out_dir / "dose_bands.csv", "w", newline="") as fh:
        import csv

        writer = csv.DictWriter(fh, fieldnames=list(groups[0]))
        writer.writeheader()
        writer.writerows(groups)

    def draw(ax):
        x = np.arange(len(values))
        ax.scatter(x, values, s=10, alpha=0.5, label="|mean dose diff| (Gy)")
        ax.plot(x, smoothed, color="tab:red", label=f"gaussian mean (bw={args.bandwidth:g})")
        ax.set_xlabel("image (delineation order)")
        ax.set_ylabel("Gy")
        ax.legend()

    _plot(out_dir / "dose_deviation.png", draw)

    def draw_bands(ax):
        labels = [f"{g['start_index'] + 1}-{g['end_index'] + 1}" for g in groups]
        x = np.arange(3)
        ax.bar(x - 0.18, [g["pct_mid_band"] for g in groups], width=0.36, label="0.25-1 Gy")
        ax.bar(x + 0.18, [g["pct_over"] for g in groups], width=0.36, label="> 1 Gy")
        ax.set_xticks(x, labels)
        ax.set_xlabel("image group (delineation order)")
        ax.set_ylabel("% of images")
        ax.legend()

    _plot(out_dir / "dose_bands.png", draw_bands)
    print(f"wrote dose analysis to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the annotation/training server")
    serve.add_argument("--root", required=True, help="project root directory")
    serve.add_argument("--config", help="service config JSON")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8722)
    serve.add_argument("--seed", type=int, default=0)
    serve.add_argument("--no-restart", action="store_true")
    serve.add_argument("--no-auto-train", action="store_true")
    serve.add_argument("--watch-dir", help="ingest annotations dropped in this folder")
    _add_network_args(serve)
    serve.set_defaults(func=cmd_serve)

    synth = sub.add_parser("synth", help="generate a synthetic ellipsoid dataset")
    synth.add_argument("--out", required=True, help="project root; volumes land in data/volumes")
    synth.add_argument("--truth-dir", help="ground-truth directory (default <out>/truth)")
    synth.add_argument("--count", type=int, default=40)
    synth.add_argument("--dims", type=_parse_dims, default=(64, 64, 64))
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--with-dose", action="store_true", help="also write synthetic dose grids")
    synth.set_defaults(func=cmd_synth)

    simulate = sub.add_parser("simulate", help="run an oracle-annotator session")
    simulate.add_argument("--root", required=True)
    simulate.add_argument("--truth-dir")
    simulate.add_argument("--out-dir", required=True)
    simulate.add_argument("--scenario", help="scenario config JSON; flags override its values")
    simulate.add_argument("--server-url", help="use a running server instead of in-process")
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--fraction", type=float, default=1.0)
    simulate.add_argument("--policy", default="largest_components_first",
                          choices=["largest_components_first", "uniform"])
    simulate.add_argument("--margin", type=int, default=8)
    simulate.add_argument("--epochs-per-image", type=int, default=2)
    simulate.add_argument("--pacing", default="step", choices=["step", "poll"])
    simulate.add_argument("--timeout", type=float, default=600.0)
    simulate.add_argument("--save-masks", help="directory for per-image pred/corrected masks")
    simulate.add_argument("--no-restart", action="store_true")
    _add_network_args(simulate)
    simulate.set_defaults(func=cmd_simulate)

    dice_p = sub.add_parser("analyze-dice", help="dice-vs-order analysis from a session report")
    dice_p.add_argument("--report", required=True)
    dice_p.add_argument("--out-dir", required=True)
    dice_p.add_argument("--window", type=int, default=60)
    dice_p.set_defaults(func=cmd_analyze_dice)

    dur = sub.add_parser("analyze-durations", help="per-image annotation durations")
    dur.add_argument("--events", required=True)
    dur.add_argument("--periods", help="JSON list of {start, stop} annotation periods")
    dur.add_argument("--out-dir", required=True)
    dur.add_argument("--threshold", type=float, default=20.0)
    dur.set_defaults(func=cmd_analyze_durations)

    dose = sub.add_parser("analyze-dose", help="mean-dose deviation analysis")
    dose.add_argument("--diffs", help="precomputed (index, volume_id, value) CSV")
    dose.add_argument("--dose-dir")
    dose.add_argument("--pred-dir")
    dose.add_argument("--cor-dir")
    dose.add_argument("--out-dir", required=True)
    dose.add_argument("--bandwidth", type=float, default=120.0)
    dose.set_defaults(func=cmd_analyze_dose)

    return parser


def _add_network_args(sub_parser) -> None:
    sub_parser.add_argument("--network-config", help="NetworkConfig overrides as JSON")
    sub_parser.add_argument("--base-features", type=int, dest="base_features")
    sub_parser.add_argument("--levels", type=int)
    sub_parser.add_argument("--groupnorm-groups", type=int, dest="groupnorm_groups")
    sub_parser.add_argument("--patch-dims", type=_parse_dims, dest="patch_dims")
    sub_parser.add_argument("--learning-rate", type=float, dest="learning_rate")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
