"""Command-line entry point: training workflow, evaluation, verification.

Exit codes: 0 success, 1 runtime error, 2 invalid configuration,
3 verification/acceptance failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import channel, config as config_mod, simulator
from .errors import AerotxError, ConfigError

REPORT_FILES = ["reports/episodes.jsonl", "reports/summary.json", "reports/summary.txt"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aerotx",
        description="Task-oriented aerial image transmission simulator")
    parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument("--profile", default=None, choices=sorted(config_mod.PROFILES),
                        help="built-in profile providing the defaults (default: desk-scale)")
    parser.add_argument("--seed", type=int, default=None, help="override the global seed")
    parser.add_argument("--out", default="runs/default", help="run directory for all outputs")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key (dotted path)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("generate-data", "generate (or refresh) the dataset for this config"),
        ("train-cs", "pretrain the sampling kernel and train the reconstruction stages"),
        ("train-classifier", "train the frozen back-end target model"),
        ("train-policy", "train the block-selection policy against frozen models"),
        ("train-all", "run every training phase plus the policy-driven finetune"),
        ("evaluate", "run the learned policy and all count-matched baselines"),
        ("report", "re-render the human-readable table and plots from saved reports"),
        ("verify-channel", "check the rate table and full-image latency row"),
        ("acceptance", "run the scripted acceptance suite"),
    ]:
        p = sub.add_parser(name, help=help_text)
        if name == "evaluate":
            p.add_argument("--deterministic-actions", action="store_true",
                           help="use the thresholded baseline action instead of sampling")
            p.add_argument("--plots", action="store_true", help="render plots as well")
        if name == "acceptance":
            p.add_argument("--artifacts", default=None,
                           help="reuse a trained run directory for the learning criteria")
            p.add_argument("--skip-learning", action="store_true",
                           help="run only the arithmetic/property tiers")
    return parser


def load_run_config(args) -> config_mod.RunConfig:
    overrides: dict = {}
    for expr in args.overrides:
        config_mod._deep_update(overrides, config_mod.parse_override(expr))
    return config_mod.load_config(args.config, profile=args.profile,
                                  overrides=overrides, seed=args.seed)


def _manifest(cfg, out_dir, command: str):
    simulator.update_manifest(out_dir, command, config_mod.config_hash(cfg), cfg.seed,
                              simulator.hash_artifacts(out_dir, simulator.MODEL_FILES))


def cmd_generate_data(cfg, out_dir, args) -> int:
    train, test = simulator.prepare_data(cfg, out_dir)
    cfg_hash = config_mod.config_hash(cfg)
    artifacts = simulator.hash_artifacts(
        out_dir, ["data/images.npy", "data/labels.npy", "data/dataset.json"])
    simulator.update_manifest(out_dir, "generate-data", cfg_hash, cfg.seed, artifacts)
    print(f"dataset ready: {len(train)} train / {len(test)} test images "
          f"({cfg.imaging.height}x{cfg.imaging.width}, {cfg.imaging.class_count} classes)")
    return 0


def cmd_train_cs(cfg, out_dir, args) -> int:
    train, _ = simulator.prepare_data(cfg, out_dir)
    simulator.train_cs_phase(cfg, out_dir, train.images)
    _manifest(cfg, out_dir, "train-cs")
    print("sampling kernel and reconstruction stages trained")
    return 0


def cmd_train_classifier(cfg, out_dir, args) -> int:
    train, test = simulator.prepare_data(cfg, out_dir)
    simulator.train_classifier_phase(cfg, out_dir, train, test)
    _manifest(cfg, out_dir, "train-classifier")
    log = json.loads((Path(out_dir) / "logs/classifier.json").read_text())
    print(f"classifier trained: train accuracy {log['train_accuracy']:.3f}, "
          f"held-out {log['heldout_accuracy']:.3f}")
    return 0


def cmd_train_policy(cfg, out_dir, args) -> int:
    simulator.require_artifacts(out_dir, [
        (simulator.KERNEL_FILE, "train-cs"), (simulator.RECON_FILE, "train-cs"),
        (simulator.CLASSIFIER_FILE, "train-classifier")])
    train, _ = simulator.prepare_data(cfg, out_dir)
    models = _load_frozen(cfg, out_dir)
    simulator.train_policy_phase(cfg, out_dir, train, models)
    _manifest(cfg, out_dir, "train-policy")
    print("policy trained")
    return 0


def _load_frozen(cfg, out_dir):
    from . import classifier as classifier_mod, cs, nn
    out = Path(out_dir)
    blobs = nn.load_tensors(out / simulator.KERNEL_FILE)
    kernel = cs.SamplingKernel(blobs["kappa"])
    ranges = cs.QuantRanges(blobs["quant_half_width"])
    recon_params = nn.ParamSet()
    recon_params.load(out / simulator.RECON_FILE)
    recon = cs.ReconModel(config_mod.cs_config(cfg), kernel, params=recon_params,
                          init_kernel=blobs["kappa_prime"])
    cls = classifier_mod.TargetModel(config_mod.classifier_config(cfg))
    cls.params.load(out / simulator.CLASSIFIER_FILE)
    return simulator.SimModels(kernel, blobs["kappa_prime"], recon, cls, None, ranges)


def cmd_train_all(cfg, out_dir, args) -> int:
    simulator.train_system(cfg, out_dir)
    print("all phases trained; artifacts and manifest written to", out_dir)
    return 0


def cmd_evaluate(cfg, out_dir, args) -> int:
    _, test = simulator.prepare_data(cfg, out_dir)
    models = simulator.load_models(cfg, out_dir)
    profile = config_mod.channel_profile(cfg)
    deterministic = getattr(args, "deterministic_actions", False) or cfg.eval.deterministic_actions
    report = simulator.evaluate(test.images, test.labels, models, profile,
                                config_mod.reward_config(cfg), seed=cfg.seed,
                                deterministic_actions=deterministic,
                                chunk=cfg.eval.chunk)
    out = Path(out_dir)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    simulator.write_jsonl(out / "reports/episodes.jsonl", report.episodes)
    simulator.write_json(out / "reports/summary.json", report.to_summary_dict())
    table = report.accuracy_table()
    (out / "reports/summary.txt").write_text(table + "\n")
    if getattr(args, "plots", False):
        render_plots(report.to_summary_dict(), out / "plots", cfg.seed)
    simulator.update_manifest(out_dir, "evaluate", config_mod.config_hash(cfg), cfg.seed,
                              simulator.hash_artifacts(out_dir, REPORT_FILES))
    print(table)
    return 0


def cmd_report(cfg, out_dir, args) -> int:
    out = Path(out_dir)
    summary_path = out / "reports/summary.json"
    if not summary_path.exists():
        raise ConfigError("missing artifact reports/summary.json; run 'evaluate' first")
    summary = json.loads(summary_path.read_text())
    report = simulator.EvalReport(summary["n_test"], summary["gains_db"],
                                  summary["policies"], summary["per_gain"])
    table = report.accuracy_table()
    (out / "reports/summary.txt").write_text(table + "\n")
    render_plots(summary, out / "plots", cfg.seed)
    print(table)
    print(f"plots written under {out / 'plots'}")
    return 0


def render_plots(summary: dict, plots_dir, seed: int):
    """Vector plots of the block-count histograms and accuracy curves."""
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = str(seed)
    import matplotlib.pyplot as plt
    plots_dir = Path(plots_dir)
    plots_dir.mkdir(parents=True, exist_ok=True)
    gains = [row["gain_db"] for row in summary["per_gain"]]

    fig, axes = plt.subplots(1, len(summary["per_gain"]), figsize=(3 * len(gains), 2.8),
                             sharey=True)
    axes = np.atleast_1d(axes)
    for ax, row in zip(axes, summary["per_gain"]):
        ax.bar(range(17), row["learned"]["histogram"], color="#4878b0")
        ax.set_title(f"{row['gain_db']:.0f} dB")
        ax.set_xlabel("transmitted blocks")
    axes[0].set_ylabel("episodes")
    fig.tight_layout()
    fig.savefig(plots_dir / "block_histograms.svg", metadata={"Date": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for name in summary["policies"]:
        accs = []
        for row in summary["per_gain"]:
            acc = row["learned"]["accuracy"] if name == "learned" else row["baselines"][name]["accuracy"]
            accs.append(acc)
        ax.plot(gains, accs, marker="o", label=name)
    ax.set_xlabel("channel gain (dB)")
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(plots_dir / "accuracy_vs_gain.svg", metadata={"Date": None})
    plt.close(fig)

    # conditional accuracy at representative block counts with enough support
    for n in (6, 8, 10, 12):
        rows = summary["per_gain"]
        if not all(str(n) in row["learned"]["conditional_accuracy"] for row in rows):
            continue
        fig, ax = plt.subplots(figsize=(6, 4))
        for name in summary["policies"]:
            accs = []
            for row in rows:
                cond = (row["learned"] if name == "learned" else row["baselines"][name])["conditional_accuracy"]
                accs.append(cond.get(str(n), np.nan))
            ax.plot(gains, accs, marker="o", label=name)
        ax.set_xlabel("channel gain (dB)")
        ax.set_ylabel(f"accuracy at N^a = {n}")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(plots_dir / f"accuracy_vs_gain_n{n}.svg", metadata={"Date": None})
        plt.close(fig)


def cmd_verify_channel(cfg, out_dir, args) -> int:
    """Reproduce the published rate table and the full-image latency row."""
    profile = config_mod.channel_profile(cfg)
    rates = channel.rate_table(profile)
    full_bits = channel.payload_bits_for(profile, 224, 224, 16)
    ok = True
    print(f"{'gain(dB)':>9} {'rate(kbps)':>11} {'target':>8} {'relerr':>9} "
          f"{'T_all(ms)':>10} {'target':>7} verdict")
    for i, g in enumerate(profile.gain_levels_db):
        target_rate = channel.PAPER_RATE_TABLE_KBPS[i]
        target_ms = channel.PAPER_FULL_LATENCY_MS[i]
        rate_kbps = rates[i] / 1e3
        rel = abs(rate_kbps - target_rate) / target_rate
        t_ms = channel.latency(full_bits, rates[i]) * 1e3
        good = rel <= 0.002 and abs(round(t_ms) - target_ms) <= 1
        ok = ok and good
        print(f"{g:>9.0f} {rate_kbps:>11.2f} {target_rate:>8.0f} {rel:>9.2%} "
              f"{t_ms:>10.1f} {target_ms:>7d} {'PASS' if good else 'FAIL'}")
    print("verify-channel:", "PASS" if ok else "FAIL")
    return 0 if ok else 3


def cmd_acceptance(cfg, out_dir, args) -> int:
    from . import acceptance
    results = acceptance.run_suite(cfg, out_dir,
                                   artifacts_dir=getattr(args, "artifacts", None),
                                   skip_learning=getattr(args, "skip_learning", False))
    print(acceptance.format_table(results))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    simulator.write_jsonl(out / "acceptance.jsonl",
                          [r.to_dict() for r in results])
    return 0 if all(r.passed for r in results if r.passed is not None) else 3


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train-cs": cmd_train_cs,
    "train-classifier": cmd_train_classifier,
    "train-policy": cmd_train_policy,
    "train-all": cmd_train_all,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "verify-channel": cmd_verify_channel,
    "acceptance": cmd_acceptance,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg, args.out, args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 2
    except AerotxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
