"""``minidream`` command line: one run directory, one config, one subcommand per pipeline step.

Every command prints a single JSON line on stdout when it succeeds. Failures print a JSON object
on stderr and exit with 2 (invalid config or arguments), 3 (missing or unreadable input),
4 (numeric abort) or 5 (run directory locked by another command).
"""
from __future__ import annotations

import argparse
import csv
import fcntl
import hashlib
import io
import json
import os
import re
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml
from pydantic import ValidationError

from . import pipeline as P
from .accel import quant
from .accel.guidance import distill_error
from .checkpoint import CheckpointError, file_hash, load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config, load_config, subseed
from .diffusion import NumericError
from .eval import elo
from .eval.metrics import text_accuracy
from .eval.ocr import ocr_match
from .eval.suite import image_grid, read_suite, write_report, write_suite
from .generator import Prompt
from .glyphgen.atlas import GlyphAtlas
from .glyphgen.dataset import DatasetManifest, read_manifest, save_png, write_manifest
from .posttrain.preferences import write_preferences
from .posttrain.refiner import refine as run_refiner
from .textenc import build_vocab

ENV_RUN_DIR = "MINIDREAM_RUN_DIR"
ENV_SEED = "MINIDREAM_SEED"
STAGE_ORDER = ("pretrain", "ct", "sft")
BASE_PREFERENCE = ("rlhf", "sft", "ct", "pretrain")

EXIT_SCHEMA, EXIT_MISSING, EXIT_NUMERIC, EXIT_LOCKED = 2, 3, 4, 5


class CLIError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def missing(message: str) -> CLIError:
    return CLIError(EXIT_MISSING, "missing_input", message)


# ---------------------------------------------------------------------------
# run directory

def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """A locked run directory with its config, JSON-lines log and artifact manifest."""

    def __init__(self, root: Path, cfg: RunConfig, command: str):
        self.root, self.cfg, self.command = root, cfg, command
        self._lock = None

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def __enter__(self) -> "Run":
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = open(self.path(".lock"), "w")
        try:
            fcntl.flock(self._lock, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            self._lock.close()
            raise CLIError(EXIT_LOCKED, "locked", f"another command holds the lock on {self.root}") from None
        stored = self.path("config.yaml")
        text = dump_config(self.cfg)
        if stored.exists() and stored.read_text(encoding="utf-8") != text:
            self.__exit__()
            raise CLIError(EXIT_SCHEMA, "config_conflict",
                           f"{self.root} was created with a different config; refusing to mix runs "
                           "(use a fresh run directory)")
        stored.write_text(text, encoding="utf-8")
        return self

    def __exit__(self, *exc):
        if self._lock is not None:
            fcntl.flock(self._lock, fcntl.LOCK_UN)
            self._lock.close()
            self._lock = None

    def log(self, **row) -> None:
        row = {"ts": round(time.time(), 3), "command": self.command, **row}
        with open(self.path("logs.jsonl"), "a", encoding="utf-8") as f:
            f.write(json.dumps(row, sort_keys=True, default=str) + "\n")

    # manifest: command key -> {"status", "outputs": {relpath: sha256}}
    def _manifest(self) -> dict:
        p = self.path("manifest.json")
        return json.loads(p.read_text(encoding="utf-8")) if p.exists() else {"commands": {}}

    def _write_manifest(self, m: dict) -> None:
        tmp = self.path("manifest.json.tmp")
        tmp.write_text(json.dumps(m, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, self.path("manifest.json"))

    def completed(self, key: str) -> dict | None:
        """Recorded result if ``key`` finished and its outputs are still intact."""
        entry = self._manifest()["commands"].get(key)
        if not entry or entry.get("status") != "done":
            return None
        for rel, digest in entry["outputs"].items():
            p = self.path(rel)
            if not p.exists() or sha256_file(p) != digest:
                return None
        return entry

    def begin(self, key: str) -> None:
        m = self._manifest()
        m["commands"][key] = {"status": "running", "outputs": {}}
        self._write_manifest(m)
        self.log(event="start", key=key)

    def finish(self, key: str, outputs: list[Path], result: dict) -> dict:
        m = self._manifest()
        rels = {str(p.relative_to(self.root)): sha256_file(p) for p in sorted(outputs)}
        m["commands"][key] = {"status": "done", "outputs": rels, "result": result}
        self._write_manifest(m)
        self.log(event="done", key=key, result=result)
        return result


def resolve_run_dir(arg: str | None) -> Path:
    return Path(arg or os.environ.get(ENV_RUN_DIR) or "run")


def resolve_config(args, run_dir: Path) -> RunConfig:
    env_seed = os.environ.get(ENV_SEED)
    seed = None
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise CLIError(EXIT_SCHEMA, "schema", f"{ENV_SEED} must be an integer, got {env_seed!r}") from None
    path = args.config
    if path is None and (run_dir / "config.yaml").exists():
        path = run_dir / "config.yaml"
    if path is not None and not Path(path).exists():
        raise missing(f"config file not found: {path}")
    return load_config(path, seed)


# ---------------------------------------------------------------------------
# shared loaders

def load_world(run: Run) -> P.World:
    d = run.path("data")
    need = [d / "atlas_latin.json", d / "atlas_cjk.json", d / "manifest.jsonl"]
    absent = [str(p) for p in need if not p.exists()]
    if absent:
        raise missing(f"dataset not found ({absent[0]}); run `minidream gen-data` first")
    latin, cjk = GlyphAtlas.load(need[0]), GlyphAtlas.load(need[1])
    items = list(read_manifest(need[2]).items)
    return P.World(latin, cjk, build_vocab(latin.codepoints + cjk.codepoints), items)


def ckpt_path(run: Run, name: str) -> Path:
    return run.path("ckpt", f"{name}.ckpt")


def default_base(run: Run) -> Path:
    for name in BASE_PREFERENCE:
        p = ckpt_path(run, name)
        if p.exists():
            return p
    raise missing(f"no trained checkpoint under {run.path('ckpt')}; run `minidream train` first")


def open_ckpt(path: Path):
    if not path.exists():
        raise missing(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def save_ckpt(run: Run, name: str, model, provenance: str, parent: Path | None, extra: dict | None = None) -> Path:
    run.path("ckpt").mkdir(exist_ok=True)
    out = ckpt_path(run, name)
    save_checkpoint(model, out, provenance, run.cfg.seed, file_hash(parent) if parent else None, extra)
    return out


def slug(text: str) -> str:
    s = re.sub(r"[^A-Za-z0-9]+", "-", text).strip("-").lower()
    return (s[:40] or "prompt") + "-" + hashlib.sha256(text.encode()).hexdigest()[:8]


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(run: Run, args) -> tuple[list[Path], dict]:
    cfg = run.cfg
    world = P.make_world(cfg)
    d = run.path("data")
    d.mkdir(exist_ok=True)
    world.latin.save(d / "atlas_latin.json")
    world.cjk.save(d / "atlas_cjk.json")
    mpath = write_manifest(DatasetManifest(tuple(world.items), subseed(cfg.seed, "data")), d)
    spath = write_suite(world.suite, d / "suite.jsonl")
    outs = [d / "atlas_latin.json", d / "atlas_cjk.json", mpath, spath] + sorted((d / "images").glob("*.png"))
    return outs, {"items": len(world.items), "manifest": str(mpath), "suite": str(spath)}


def cmd_train(run: Run, args) -> tuple[list[Path], dict]:
    cfg, stage = run.cfg, args.stage
    cfg.stage(stage)  # must be configured
    world = load_world(run)
    parent = None
    init = None
    if stage != "pretrain":
        if args.init:
            parent = Path(args.init)
        else:
            names = [s.stage for s in cfg.stages]
            prev = names[: names.index(stage)]
            if not prev:
                raise missing(f"stage {stage!r} has no earlier stage in the schedule; pass --init")
            parent = ckpt_path(run, prev[-1])
        init, _ = open_ckpt(parent)
    model = P.train(cfg, world, stage, init=init, on_log=lambda row: run.log(event="step", **row))
    out = save_ckpt(run, stage, model, stage, parent)
    return [out], {"checkpoint": str(out), "stage": stage}


def cmd_rlhf(run: Run, args) -> tuple[list[Path], dict]:
    cfg = run.cfg
    world = load_world(run)
    parent = Path(args.init) if args.init else default_base(run)
    if parent.name == "rlhf.ckpt" and not args.init:
        parent = next((ckpt_path(run, n) for n in BASE_PREFERENCE[1:] if ckpt_path(run, n).exists()), parent)
    model, _ = open_ckpt(parent)
    records = P.preference_data(cfg, world)
    pdir = run.path("prefs")
    ppath = write_preferences(records, pdir)
    rm = P.text_reward_model(cfg, world, records)
    res = P.rlhf(cfg, world, model, records, rm)
    out = save_ckpt(run, "rlhf", res.model, "rlhf", parent)
    rmp = run.path("ckpt", "reward_text.pt")
    torch.save(res.text_rm.state_dict(), rmp)
    mpath = run.path("rlhf_metrics.json")
    mpath.write_text(json.dumps(res.metrics, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    last = res.metrics[-1] if res.metrics else {}
    return [out, rmp, mpath, ppath], {"checkpoint": str(out), "records": len(records),
                                      "ra_before": last.get("ra_before"), "ra_after": last.get("ra_after")}


def cmd_refine(run: Run, args) -> tuple[list[Path], dict]:
    cfg = run.cfg
    world = load_world(run)
    parent = Path(args.init) if args.init else default_base(run)
    base, _ = open_ckpt(parent)
    ref, _ = P.train_refiner(cfg, world, base, on_log=lambda row: run.log(event="step", **row))
    out = save_ckpt(run, "refiner", ref, "refiner", parent)
    prompts = [s.prompt for s in world.suite]
    lo = P.generate(cfg, base, prompts, seed=subseed(cfg.seed, "eval"))
    up = torch.nn.functional.interpolate(lo, scale_factor=2, mode="nearest")
    hi = run_refiner(ref, lo, prompts, strength=cfg.refine.strength, steps=cfg.refine.steps,
                     seed=subseed(cfg.seed, "refine/sample"))
    atlas = world.atlas

    def acc(imgs):
        return float(np.mean([text_accuracy(ocr_match(x.numpy(), atlas, it.spec.scaled(2)).decoded, it.spec.text)
                              for x, it in zip(imgs, world.items)]))

    rdir = run.path("refine")
    rdir.mkdir(exist_ok=True)
    save_png(image_grid(up), rdir / "naive.png")
    save_png(image_grid(hi), rdir / "refined.png")
    result = {"checkpoint": str(out), "ra_naive": acc(up), "ra_refined": acc(hi), "size": list(hi.shape[-2:])}
    (rdir / "metrics.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return [out, rdir / "naive.png", rdir / "refined.png", rdir / "metrics.json"], result


def cmd_distill(run: Run, args) -> tuple[list[Path], dict]:
    cfg = run.cfg
    world = load_world(run)
    parent = Path(args.init) if args.init else default_base(run)
    teacher, _ = open_ckpt(parent)
    on_log = lambda row: run.log(event="step", **row)  # noqa: E731
    if args.kind == "cfg":
        student, _ = P.distill_cfg(cfg, world, teacher, on_log)
        lo, hi = cfg.accel.cfg.w_range
        ws = sorted({lo, (lo + hi) / 2, hi})
        result = {"relative_error": {str(w): distill_error(teacher, student, world.items, [w]) for w in ws}}
        out = save_ckpt(run, "distilled_cfg", student, "distilled_cfg", parent, {"w_range": [lo, hi]})
    else:
        student, _ = P.distill_tscd(cfg, world, teacher, on_log)
        result = {"ra_few_step": P.evaluate(cfg, student, world, sampler=P.tscd_sampler(cfg, student)).r_a,
                  "few_steps": cfg.accel.few_steps}
        out = save_ckpt(run, "distilled_tscd", student, "distilled_tscd", parent, {"few_steps": cfg.accel.few_steps})
    return [out], {"checkpoint": str(out), **result}


def cmd_quantize(run: Run, args) -> tuple[list[Path], dict]:
    cfg = run.cfg
    world = load_world(run)
    parent = Path(args.init) if args.init else default_base(run)
    model, _ = open_ckpt(parent)
    qmodel, plan, report = P.quantize(cfg, world, model)
    qdir = run.path("quant")
    qdir.mkdir(exist_ok=True)
    plan.save(qdir / "plan.json")
    (qdir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    out = save_ckpt(run, "quantized", quant.materialize(qmodel), "quantized", parent, {"plan": cfg.accel.quant.plan})
    return [out, qdir / "plan.json", qdir / "report.json"], {"checkpoint": str(out), **{
        k: report[k] for k in ("bits", "heldout_loss_fp", "heldout_loss_quant", "max_roundoff_violation")}}


def cmd_sample(run: Run, args) -> tuple[list[Path], dict]:
    cfg = run.cfg
    path = Path(args.ckpt) if args.ckpt else default_base(run)
    model, header = open_ckpt(path)
    if header.provenance == "refiner":
        raise CLIError(EXIT_SCHEMA, "schema", "refiner checkpoints need a low-resolution input; use `refine`")
    try:
        prompt = Prompt(args.prompt)
        prompts = [prompt] * args.n
        imgs = P.generate(cfg, model, prompts, header.provenance, steps=args.steps, w=args.w, seed=args.seed)
    except (KeyError, ValueError) as e:
        raise CLIError(EXIT_SCHEMA, "schema", f"cannot encode prompt {args.prompt!r}: {e}") from None
    sdir = Path(args.out) if args.out else run.path("samples")
    sdir.mkdir(parents=True, exist_ok=True)
    outs = []
    for i, img in enumerate(imgs):
        outs.append(sdir / f"{slug(args.prompt)}-{i}.png")
        save_png(img.numpy(), outs[-1])
    return outs, {"images": [str(p) for p in outs], "checkpoint": str(path)}


def cmd_eval(run: Run, args) -> tuple[list[Path], dict]:
    cfg = run.cfg
    world = load_world(run)
    suite_path = run.path("data", "suite.jsonl") if args.suite == "small" else Path(args.suite)
    if not suite_path.exists():
        raise missing(f"prompt suite not found: {suite_path}")
    suite = read_suite(suite_path)
    path = Path(args.ckpt) if args.ckpt else default_base(run)
    model, header = open_ckpt(path)
    sampler = P.tscd_sampler(cfg, model) if header.provenance == "distilled_tscd" else None
    report = P.evaluate(cfg, model, world, suite, sampler=sampler)
    files = write_report(report, run.path("eval", path.stem))
    summary = report.summary
    return list(files.values()), {"report": str(run.path("eval", path.stem)), "overall": summary["overall"],
                                  "failures": summary["failures"], "warnings": summary["warnings"]}


def cmd_rank(run: Run, args) -> tuple[list[Path], dict]:
    log_path = Path(args.log)
    if not log_path.exists():
        raise missing(f"preference log not found: {log_path}")
    try:
        table = elo.elo_ratings(elo.read_log(log_path), k=args.k)
    except KeyError as e:
        raise CLIError(EXIT_SCHEMA, "schema", f"preference record lacks field {e}") from None
    except ValueError as e:
        raise CLIError(EXIT_SCHEMA, "schema", f"{log_path}: {e}") from None
    rdir = run.path("rank")
    rdir.mkdir(exist_ok=True)
    rows = elo.standings(table)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("rank", "model", "elo"))
    for i, (m, r) in enumerate(rows, 1):
        w.writerow((i, m, f"{r:.4f}"))
    (rdir / "standings.csv").write_text(buf.getvalue(), encoding="utf-8")
    result = {"standings": [{"model": m, "elo": r} for m, r in rows]}
    outs = [rdir / "standings.csv"]
    if args.likert:
        lp = Path(args.likert)
        if not lp.exists():
            raise missing(f"Likert score file not found: {lp}")
        try:
            with open(lp, newline="", encoding="utf-8") as f:
                result["likert"] = elo.likert_aggregate((r["model"], r["reviewer"], r["item"], float(r["score"]))
                                                        for r in csv.DictReader(f))
        except (KeyError, ValueError) as e:
            raise CLIError(EXIT_SCHEMA, "schema", f"{lp}: {e}") from None
    (rdir / "standings.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    outs.append(rdir / "standings.json")
    if rows:
        outs.append(_rank_figure(rows, rdir / "standings.png"))
    return outs, result


def _rank_figure(rows, path: Path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 0.4 * len(rows) + 1))
    ax.barh([m for m, _ in rows][::-1], [r for _, r in rows][::-1])
    ax.set_xlabel("Elo")
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)
    return path


COMMANDS = {
    "gen-data": (cmd_gen_data, lambda a: "gen-data"),
    "train": (cmd_train, lambda a: f"train:{a.stage}"),
    "rlhf": (cmd_rlhf, lambda a: "rlhf"),
    "refine": (cmd_refine, lambda a: "refine"),
    "distill": (cmd_distill, lambda a: f"distill:{a.kind}"),
    "quantize": (cmd_quantize, lambda a: "quantize"),
    "sample": (cmd_sample, None),
    "eval": (cmd_eval, None),
    "rank": (cmd_rank, None),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minidream", description=__doc__.splitlines()[0])
    p.add_argument("--run-dir", help=f"run directory (default ${ENV_RUN_DIR} or ./run)")
    p.add_argument("--config", help="YAML/JSON run config (default: the run directory's stored config)")
    p.add_argument("--force", action="store_true", help="redo a command even if it already completed")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 keeps runs bit-stable)")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="render the glyph dataset and prompt suite")
    t = sub.add_parser("train", help="train one stage of the schedule")
    t.add_argument("--stage", choices=STAGE_ORDER, default="pretrain")
    t.add_argument("--init", help="initial checkpoint for ct/sft (default: previous stage)")
    for name, helptext in (("rlhf", "reward-model training and REFL with iterative refinement"),
                           ("refine", "train the 2x refiner"), ("quantize", "simulated weight quantization")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--init", help="base checkpoint (default: latest of rlhf/sft/ct/pretrain)")
    d = sub.add_parser("distill", help="CFG or segmented consistency distillation")
    d.add_argument("--kind", choices=("cfg", "tscd"), default="cfg")
    d.add_argument("--init", help="teacher checkpoint")
    s = sub.add_parser("sample", help="generate PNGs for one prompt")
    s.add_argument("--prompt", required=True)
    s.add_argument("--ckpt")
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--steps", type=int)
    s.add_argument("--w", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="output directory (default: <run>/samples)")
    e = sub.add_parser("eval", help="closed-loop OCR evaluation on a prompt suite")
    e.add_argument("--suite", default="small", help="'small' (the generated suite) or a JSON-lines file")
    e.add_argument("--ckpt")
    r = sub.add_parser("rank", help="Elo standings from a JSON-lines preference log")
    r.add_argument("--log", required=True)
    r.add_argument("--likert", help="optional CSV with model,reviewer,item,score columns")
    r.add_argument("--k", type=float, default=elo.K_FACTOR)
    return p


def _error(code: int, kind: str, message: str, command: str | None) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code, "command": command}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    fn, key_fn = COMMANDS[args.command]
    run_dir = resolve_run_dir(args.run_dir)
    try:
        cfg = resolve_config(args, run_dir)
        with Run(run_dir, cfg, args.command) as run:
            key = key_fn(args) if key_fn else None
            if key and not args.force:
                done = run.completed(key)
                if done is not None:
                    print(json.dumps({"command": args.command, "status": "already_complete", **done["result"]},
                                     sort_keys=True))
                    return 0
            if key:
                run.begin(key)
            outputs, result = fn(run, args)
            if key:
                run.finish(key, outputs, result)
            else:
                run.log(event="done", result=result)
        print(json.dumps({"command": args.command, "status": "ok", **result}, sort_keys=True, default=str))
        return 0
    except CLIError as e:
        return _error(e.code, e.kind, str(e), args.command)
    except (ValidationError, yaml.YAMLError) as e:
        return _error(EXIT_SCHEMA, "schema", str(e), args.command)
    except KeyError as e:
        return _error(EXIT_SCHEMA, "schema", f"not configured: {e}", args.command)
    except (FileNotFoundError, CheckpointError) as e:
        return _error(EXIT_MISSING, "missing_input", str(e), args.command)
    except NumericError as e:
        return _error(EXIT_NUMERIC, "numeric", str(e), args.command)
    except Exception as e:  # noqa: BLE001 - still report machine-readably
        return _error(1, "internal", f"{type(e).__name__}: {e}", args.command)


if __name__ == "__main__":
    sys.exit(main())
