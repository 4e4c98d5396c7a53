"""Command-line interface.

Every command writes a ``manifest.json`` next to its outputs.  ``ists rerun
manifest.json`` replays it.  Failures print ``error: <code>: <message>`` on
one line and exit with status 2.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import evaluation as ev
from .attacks import ATTACK_KINDS, avg_forgery, avg_removal, avg_residual, imp_forgery, imp_removal, vae_forgery, vae_removal
from .backend import PromptContext, make_backend
from .codec import ToyCodec
from .config import (
    KeyFile, RunConfig, RunManifest, env_overrides, list_images, load_config, load_image, save_config, save_png,
)
from .distortions import DISTORTION_KINDS, DistortionSpec, distort
from .errors import ArgumentError, ConfigError, IstsError
from .pipeline import Watermarker, calibrate_threshold, scheme_by_name
from .plotting import auc_bars, grid_heatmap, read_csv, sweep_curves
from .selector import BlockMeanEncoder, load_selector, save_selector, train_selector

log = logging.getLogger("ists")


class UsageError(IstsError):
    code = "usage-error"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def write_csv(path, rows: Sequence[dict], fieldnames: Sequence[str] | None = None) -> None:
    fieldnames = list(fieldnames or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


class Run:
    """Resolved config, key, output directory and the manifest being built."""

    def __init__(self, args, argv):
        self.args = args
        cfg = load_config(args.config)
        env = env_overrides()
        seed = args.seed if args.seed is not None else env.get("seed")
        workers = args.workers if args.workers is not None else env.get("workers")
        self.cfg: RunConfig = cfg.with_overrides(seed, workers)
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(args.command, list(argv), self.cfg.to_dict(), seeds={"run": self.cfg.seed})
        self.key: KeyFile | None = None
        if getattr(args, "key", None):
            self.key = KeyFile.load(args.key)
            self.manifest.key_fingerprint = self.key.fingerprint
            self.manifest.inputs.append(str(args.key))
        self._t0 = time.perf_counter()
        self._backend = None

    def require_key(self) -> KeyFile:
        if self.key is None:
            raise ConfigError(f"{self.args.command} needs --key")
        if self.key.mapping != self.cfg.mapping:
            raise ConfigError("the key file's mapping differs from the run config's mapping")
        return self.key

    @property
    def backend(self):
        if self._backend is None:
            self._backend = make_backend(self.cfg.backend)
        return self._backend

    @property
    def codec(self):
        return ToyCodec.for_backend(self.backend, self.cfg.codec_seed)

    def context(self, prompt: str) -> PromptContext:
        return PromptContext.from_prompt(prompt, self.cfg.seed)

    def selector(self, required: bool):
        path = getattr(self.args, "selector", None)
        if path is None:
            if required:
                raise ConfigError("this scheme needs --selector")
            return None
        self.manifest.inputs.append(str(path))
        return load_selector(path, self.require_key().permutation_key)

    def watermarker(self, scheme) -> Watermarker:
        key = self.require_key()
        sel = self.selector(scheme.needs_selector)
        return Watermarker(self.backend, self.cfg.pattern_key(key.pattern_seed), sel, self.codec)

    def output(self, name: str) -> Path:
        p = self.out / name
        self.manifest.outputs.append(str(p))
        return p

    def finish(self) -> None:
        self.manifest.timing["seconds"] = round(time.perf_counter() - self._t0, 3)
        self.manifest.save(self.out / "manifest.json")


def read_prompts(args) -> list[str]:
    if getattr(args, "prompts", None):
        try:
            lines = Path(args.prompts).read_text().splitlines()
        except OSError as exc:
            raise ArgumentError(f"cannot read prompts file: {exc.strerror}") from exc
        prompts = [ln.strip() for ln in lines if ln.strip()]
        if not prompts:
            raise ArgumentError("prompts file is empty")
        return prompts
    return ev.prompts_for(args.n)


def _image_name(i: int) -> str:
    return f"{i:05d}.png"


# -- commands -------------------------------------------------------------------


def cmd_keygen(run: Run) -> None:
    key = KeyFile.generate(run.cfg.mapping, run.args.key_seed)
    path = run.output("key.json")
    key.save(path)
    log.info("wrote key %s (fingerprint %s)", path, key.fingerprint)
    run.manifest.key_fingerprint = key.fingerprint


def cmd_train_selector(run: Run) -> None:
    key = run.require_key()
    C = run.cfg.mapping.C
    enc = BlockMeanEncoder()
    if run.args.corpus:
        paths = list_images(run.args.corpus)
        run.manifest.inputs.append(str(run.args.corpus))
        images = [load_image(p) for p in paths]
    else:
        prompts = read_prompts(run.args)
        wm = Watermarker(run.backend, run.cfg.pattern_key(key.pattern_seed), None, run.codec)
        images = ev.pmap(lambda p: wm.generate_plain(run.context(p)), prompts, run.cfg.evaluation.workers)
        images = [np.round(np.clip(x, 0, 1) * 255) / 255 for x in images]
    if C > len(images):
        raise ArgumentError(
            f"C={C} clusters need at least {C} images but only {len(images)} are available; "
            "lower mapping.C or add images"
        )
    feats = np.array([enc.encode(x) for x in images])
    model = train_selector(feats, run.cfg.mapping, key.permutation_key, run.cfg.evaluation.selector_mode,
                           seed=run.cfg.seed, encoder=enc)
    save_selector(run.output("selector.zip"), model)
    sizes = np.bincount(model.cluster_sizes, minlength=1)
    hist = {int(k): int(v) for k, v in enumerate(sizes) if v}
    print("cluster sizes (size: count): " + ", ".join(f"{k}: {v}" for k, v in hist.items()))
    empty = int(np.sum(model.cluster_sizes == 0))
    if empty:
        log.warning("%d of %d clusters are empty", empty, C)
    run.manifest.extra["cluster_size_histogram"] = hist
    run.manifest.seeds["kmeans"] = run.cfg.seed


def cmd_generate(run: Run) -> None:
    scheme = scheme_by_name(run.args.scheme or run.cfg.scheme)
    prompts = read_prompts(run.args)
    mode = "watermark" if run.args.watermark else "plain"
    if mode == "watermark":
        wm = run.watermarker(scheme)
    else:
        wm = Watermarker(run.backend, run.cfg.pattern_key(0), None, run.codec)

    def one(i):
        ctx = run.context(prompts[i])
        if mode == "plain":
            return wm.generate_plain(ctx), None
        return wm.generate_watermarked(ctx, scheme)

    out = ev.pmap(one, list(range(len(prompts))), run.cfg.evaluation.workers)
    records = []
    for i, (image, params) in enumerate(out):
        name = _image_name(i)
        save_png(run.output(name), image)
        rec = {"file": name, "prompt": prompts[i], "seed": run.context(prompts[i]).seed}
        if params is not None:
            rec.update(t=params.t, lx=params.l.lx, ly=params.l.ly)
        records.append(rec)
    run.manifest.extra.update(mode=mode, scheme=scheme.name, images=records)


def cmd_detect(run: Run) -> None:
    scheme = scheme_by_name(run.args.scheme or run.cfg.scheme)
    wm = run.watermarker(scheme)
    paths = _expand(run.args.images)
    if run.args.tau is not None:
        tau = run.args.tau
    elif run.args.calibrate_dir:
        benign = [load_image(p) for p in list_images(run.args.calibrate_dir)]
        scores = ev.pmap(lambda im: wm.detect(im, scheme).d, benign, run.cfg.evaluation.workers)
        tau = calibrate_threshold(scores, run.args.fpr or run.cfg.evaluation.fpr)
        run.manifest.extra["calibration"] = {"n": len(benign), "tau": tau}
    else:
        raise ArgumentError("detect needs --tau or --calibrate-dir")
    results = ev.pmap(lambda p: wm.detect(load_image(p), scheme, tau), paths, run.cfg.evaluation.workers)
    rows = [
        {
            "file": str(p), "d": r.d, "side": r.side, "threshold": r.threshold, "decision": int(r.decision),
            "t": r.params_used.t, "lx": r.params_used.l.lx, "ly": r.params_used.l.ly,
            "d_plus": r.d_plus, "d_minus": r.d_minus,
        }
        for p, r in zip(paths, results)
    ]
    write_csv(run.output("detections.csv"), rows,
              ["file", "d", "side", "threshold", "decision", "t", "lx", "ly", "d_plus", "d_minus"])
    rate = np.mean([r["decision"] for r in rows]) if rows else float("nan")
    print(f"{len(rows)} images, threshold {tau:.6g}, flagged {rate:.2%}")


def _expand(items) -> list[Path]:
    paths = []
    for it in items:
        p = Path(it)
        paths.extend(list_images(p) if p.is_dir() else [p])
    if not paths:
        raise ArgumentError("no input images")
    return paths


def cmd_attack(run: Run) -> None:
    kind = run.args.kind
    cfg = run.cfg.attack.config(kind)
    if run.args.steps:
        cfg = replace(cfg, steps=run.args.steps)
    paths = _expand(run.args.inputs)
    images = [load_image(p) for p in paths]
    ref = None
    if kind in ("imp-forgery", "vae-forgery"):
        if not run.args.reference:
            raise ArgumentError(f"{kind} needs --reference (a watermarked image)")
        ref = load_image(run.args.reference)
    rows, traces = [], []
    if kind.startswith("avg"):
        if not run.args.pairs:
            raise ArgumentError(f"{kind} needs --pairs DIR with watermarked/ and plain/ subdirectories")
        wdir, pdir = Path(run.args.pairs) / "watermarked", Path(run.args.pairs) / "plain"
        wnames = {p.name for p in list_images(wdir)}
        names = sorted(wnames & {p.name for p in list_images(pdir)})
        if len(names) < cfg.n_pairs:
            raise ArgumentError(f"--pairs holds {len(names)} complete pairs; the attack needs N={cfg.n_pairs}")
        names = names[: cfg.n_pairs]
        delta = avg_residual([load_image(wdir / n) for n in names], [load_image(pdir / n) for n in names])
        fn = avg_removal if kind == "avg-removal" else avg_forgery
        outs = [fn(x, delta) for x in images]
        rows = [{"file": p.name, "kind": kind, "perturbation_norm": float(np.linalg.norm(o - x)),
                 "final_loss": "", "steps": 0} for p, x, o in zip(paths, images, outs)]
    else:
        backend, codec = run.backend, run.codec

        def one(i):
            x, ctx = images[i], run.context(paths[i].stem)
            if kind == "imp-removal":
                return imp_removal(x, ctx, cfg, backend, codec)
            if kind == "imp-forgery":
                return imp_forgery(x, ref, ctx, cfg, backend, codec)
            if kind == "vae-removal":
                return vae_removal(x, cfg, codec)
            return vae_forgery(x, ref, cfg, codec)

        res = ev.pmap(one, list(range(len(images))), run.cfg.evaluation.workers)
        outs = [r.attacked_image for r in res]
        for p, r in zip(paths, res):
            rows.append({"file": p.name, "kind": kind, "perturbation_norm": r.perturbation_norm,
                         "final_loss": r.loss_trace[-1], "steps": len(r.loss_trace)})
            traces.extend({"file": p.name, "step": k, "loss": v} for k, v in enumerate(r.loss_trace))
    for p, o in zip(paths, outs):
        save_png(run.output(p.name), o)
    write_csv(run.output("attack.csv"), rows, ["file", "kind", "perturbation_norm", "final_loss", "steps"])
    if traces:
        write_csv(run.output("loss_traces.csv"), traces, ["file", "step", "loss"])
    run.manifest.extra["attack"] = cfg.to_dict()


def cmd_distort(run: Run) -> None:
    spec = DistortionSpec(run.args.kind, run.args.magnitude, not run.args.crop_by_side)
    for i, p in enumerate(_expand(run.args.inputs)):
        seed = run.cfg.seed * 1_000_003 + i
        save_png(run.output(p.name), distort(load_image(p), spec, seed))
    run.manifest.extra["distortion"] = spec.label


def _lab(run: Run, prompts) -> ev.Lab:
    key = run.require_key()
    e = run.cfg.evaluation
    lab = ev.build_lab(
        run.cfg.backend, run.cfg.pattern_key(key.pattern_seed), run.cfg.mapping, key.permutation_key, prompts,
        run.cfg.seed, e.selector_mode, e.workers, run.cfg.codec_seed,
    )
    lab.fpr = e.fpr
    return lab


def cmd_evaluate(run: Run) -> None:
    e = run.cfg.evaluation
    prompts = ev.prompts_for(run.args.n or e.n_images)
    lab = _lab(run, prompts)
    seed = run.cfg.seed
    run_id = run.manifest.run_id
    acfg = run.cfg.attack.config("imp-removal")
    if run.args.matrix:
        cells = ev.run_matrix(lab, e.schemes, ATTACK_KINDS, e.distortion_specs(), prompts, acfg, seed)
        rows = ev.result_rows(cells, run_id, seed)
        write_csv(run.output("results.csv"), rows, ev.CSV_FIELDS)
        _write_tables(run, cells, "matrix")
        auc_bars([r for r in rows if r["status"] != "aggregate"], run.output("matrix_auc.png"), title="AUC")
    elif run.args.ablation:
        cells = ev.ablation(lab, prompts, acfg, seed)
        rows = ev.result_rows(cells, run_id, seed)
        write_csv(run.output("results.csv"), rows, ev.CSV_FIELDS)
        table = _write_tables(run, cells, "ablation")
        grid_heatmap(table, run.output("ablation_auc.png"), title="AUC")
    else:
        res = ev.step_sweep(lab, prompts, e.sweep, attack_cfg=acfg, seed=seed)
        rows = ev.result_rows(res.cells, run_id, seed)
        write_csv(run.output("results.csv"), rows, ev.CSV_FIELDS)
        write_csv(run.output("sweep.csv"), res.table(), ["t_lo", "t_hi", "attack", "auc", "tpr_at_1fpr"])
        sweep_curves(res.table(), run.output("sweep_auc.png"))
        for attack, rho in res.trend.items():
            print(f"trend {attack}: spearman(range start, AUC) = {rho:+.3f}")
        run.manifest.extra["sweep_trend"] = res.trend
    failed = [r for r in rows if str(r["status"]).startswith("failed")]
    if failed:
        log.warning("%d cells failed; see the status column", len(failed))


def _write_tables(run: Run, cells, stem: str) -> list[dict]:
    """Scheme x attack AUC and TPR tables with the aggregate columns appended."""
    aggs = ev.aggregate(cells)
    out = {}
    for metric, agg_metric in (("auc", "auc"), ("tpr", "tpr")):
        table = ev.pivot(cells, metric)
        for row in table:
            for a in aggs:
                if a.scheme == row["scheme"]:
                    row[a.attack] = getattr(a, agg_metric)
        write_csv(run.output(f"{stem}_{metric}.csv"), table)
        out[metric] = table
    return [{k: v for k, v in r.items() if k == "scheme" or k in ATTACK_KINDS} for r in out["auc"]]


def cmd_report(run: Run) -> None:
    src = Path(run.args.results)
    files = [src] if src.is_file() else sorted(src.glob("*.csv"))
    if not files:
        raise ArgumentError(f"no CSV files under {src}")
    made = 0
    for f in files:
        rows = read_csv(f)
        if not rows:
            continue
        cols = set(rows[0])
        if {"scheme", "attack", "distortion", "auc"} <= cols:
            plain = [r for r in rows if r.get("status") != "aggregate"]
            auc_bars(plain, run.output(f"{f.stem}_auc.png"), "auc")
            auc_bars(plain, run.output(f"{f.stem}_tpr.png"), "tpr_at_1fpr")
            made += 2
        elif {"t_lo", "t_hi", "attack", "auc"} <= cols:
            sweep_curves(rows, run.output(f"{f.stem}_auc.png"))
            made += 1
        run.manifest.inputs.append(str(f))
    print(f"wrote {made} figure(s) to {run.out}")


def cmd_config(run: Run) -> None:
    cfg = RunConfig.toy() if run.args.preset == "toy" else RunConfig()
    save_config(run.output("config.json"), cfg.validate())


COMMANDS = {
    "keygen": cmd_keygen,
    "train-selector": cmd_train_selector,
    "generate": cmd_generate,
    "detect": cmd_detect,
    "attack": cmd_attack,
    "distort": cmd_distort,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "init-config": cmd_config,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config (default: built-in settings)")
    common.add_argument("--seed", type=int, help="global seed (env ISTS_SEED)")
    common.add_argument("--workers", type=int, help="worker threads (env ISTS_WORKERS)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ists", description="Instance-specific watermarking for diffusion models")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init-config", parents=[common], help="write a config file")
    s.add_argument("--preset", choices=["paper", "toy"], default="toy")

    s = sub.add_parser("keygen", parents=[common], help="create a secret key file")
    s.add_argument("--key-seed", type=int, help="derive the key from this seed (reproducible)")

    def prompts(sp, n_default=None):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--prompts", help="text file, one prompt per line")
        g.add_argument("--n", type=int, default=n_default, help="use N generated prompt names")

    s = sub.add_parser("train-selector", parents=[common], help="fit the parameter selector")
    s.add_argument("--key", required=True)
    s.add_argument("--corpus", help="directory of non-watermarked images")
    prompts(s, 64)

    s = sub.add_parser("generate", parents=[common], help="generate plain or watermarked images")
    s.add_argument("--key")
    s.add_argument("--selector")
    s.add_argument("--scheme")
    m = s.add_mutually_exclusive_group(required=True)
    m.add_argument("--plain", action="store_true")
    m.add_argument("--watermark", action="store_true")
    prompts(s, 64)

    s = sub.add_parser("detect", parents=[common], help="score images")
    s.add_argument("images", nargs="+", help="image files or directories")
    s.add_argument("--key", required=True)
    s.add_argument("--selector")
    s.add_argument("--scheme")
    s.add_argument("--tau", type=float)
    s.add_argument("--calibrate-dir")
    s.add_argument("--fpr", type=float)

    s = sub.add_parser("attack", parents=[common], help="run a removal or forgery attack")
    s.add_argument("--kind", required=True, choices=ATTACK_KINDS)
    s.add_argument("inputs", nargs="+")
    s.add_argument("--reference", help="watermarked reference image (forgery)")
    s.add_argument("--pairs", help="directory with watermarked/ and plain/ (avg-*)")
    s.add_argument("--steps", type=int)

    s = sub.add_parser("distort", parents=[common], help="apply an image distortion")
    s.add_argument("--kind", required=True, choices=DISTORTION_KINDS)
    s.add_argument("--magnitude", type=float)
    s.add_argument("--crop-by-side", action="store_true")
    s.add_argument("inputs", nargs="+")

    s = sub.add_parser("evaluate", parents=[common], help="attack matrix, ablation or step sweep")
    m = s.add_mutually_exclusive_group(required=True)
    m.add_argument("--matrix", action="store_true")
    m.add_argument("--ablation", action="store_true")
    m.add_argument("--sweep", action="store_true")
    s.add_argument("--key", required=True)
    s.add_argument("--n", type=int, help="images per cell (default from config)")

    s = sub.add_parser("report", parents=[common], help="render figures from result CSVs")
    s.add_argument("--results", required=True, help="CSV file or directory")

    s = sub.add_parser("rerun", help="replay a run manifest")
    s.add_argument("manifest")
    return p


def _dispatch(argv: list[str]) -> None:
    args = build_parser().parse_args(argv)
    if args.command == "rerun":
        man = RunManifest.load(args.manifest)
        if not man.argv or man.argv[0] == "rerun":
            raise ConfigError("manifest holds no replayable command")
        return _dispatch(man.argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    run = Run(args, argv)
    COMMANDS[args.command](run)
    run.finish()


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _dispatch(argv)
    except IstsError as exc:
        print(f"error: {exc.code}: {_one_line(exc)}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: io-error: {_one_line(exc)}", file=sys.stderr)
        return 2
    return 0


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
