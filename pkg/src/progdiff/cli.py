"""Command-line operator surface.

Five subcommands drive the whole workflow: gen-data builds a synthetic
longitudinal cohort, train fits the conditional denoiser on consecutive
visit pairs, predict samples a follow-up image for one subject, evaluate
scores a whole split (each scored prediction is the mean of eval.samples
ancestral draws, a posterior-mean estimate), and inspect-graph dumps the
learned patch graph of a checkpoint for one input image.  A single JSON
config file feeds every command; individual flags win over the file.

The MBCT_THREADS environment variable caps worker parallelism for the
evaluation fan-out.  All CSV outputs carry a header row and are written
atomically.
"""

import argparse
import copy
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import tensor as T
from . import synthdata as SD
from .anatgraph import build_adjacency, eigendecompose, normalized_laplacian
from .controlnet import (DualPathModel, ModelConfig, count_parameters,
                         load_model, save_checkpoint)
from .diffusion import Condition, make_schedule, sample, training_loss
from .metrics import EvalReport, score_pair
from .optim import AdamW, NonFiniteGradient
from .ssm import gated_encode
from .synthdata import _atomic_write


class CliError(Exception):
    """User-facing failure; main() prints it and exits nonzero."""


# ---------------------------------------------------------------------------
# configuration


DEFAULTS = {
    "model": {"image_size": 32, "channels": 1, "patch": 4, "dim": 64,
              "blocks_per_stage": 2, "stages": 2, "state_dim": 16,
              "cheb_k": 3, "t_steps": 200, "temb_dim": 64, "cov_dim": 2,
              "scan_inner": None},
    "train": {"steps": 3000, "batch_size": 4, "lr": 1e-4,
              "weight_decay": 0.01, "clip_norm": 2.0, "seed": 0,
              "checkpoint_interval": 1000},
    "data": {"path": "data", "image_size": 32, "cohort_size": 200},
    "eval": {"split": "test", "output_csv": "eval.csv", "seed": 0,
             "batch": 16, "samples": 2},
    "control": {"mode": "none"},
}

CONTROL_CHOICES = ("none", "spatial", "fourier")


def _coerce(raw: str, template):
    if isinstance(template, bool):
        if raw in ("1", "true", "True"):
            return True
        if raw in ("0", "false", "False"):
            return False
        raise CliError(f"expected a boolean, got {raw!r}")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if template is None:
        if raw in ("null", "none", "None"):
            return None
        try:
            return int(raw)
        except ValueError:
            return raw
    return raw


class RunConfig:
    """Deep-merged config tree over DEFAULTS; unknown keys are rejected."""

    def __init__(self, tree=None):
        self.tree = copy.deepcopy(DEFAULTS)
        for section, sub in (tree or {}).items():
            if section not in self.tree:
                raise CliError(f"config: unknown section {section!r}")
            if not isinstance(sub, dict):
                raise CliError(f"config: section {section!r} must be a "
                               f"JSON object")
            for key, val in sub.items():
                if key not in self.tree[section]:
                    raise CliError(
                        f"config: unknown key {section}.{key}")
                self.tree[section][key] = val
        self.validate()

    def validate(self):
        mode = self.tree["control"]["mode"]
        if mode not in CONTROL_CHOICES:
            raise CliError(f"config: control.mode must be one of "
                           f"{CONTROL_CHOICES}, got {mode!r}")
        tr = self.tree["train"]
        for key in ("steps", "batch_size", "checkpoint_interval"):
            if int(tr[key]) < 0 or (key != "checkpoint_interval"
                                    and int(tr[key]) < 1):
                raise CliError(f"config: train.{key} must be positive")
        if int(self.tree["eval"]["samples"]) < 1:
            raise CliError("config: eval.samples must be >= 1")

    def __getitem__(self, section):
        return self.tree[section]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.tree == other.tree

    def override(self, dotted: str, raw: str):
        if dotted.count(".") != 1:
            raise CliError(f"--set wants section.key=value, got {dotted!r}")
        section, key = dotted.split(".")
        if section not in self.tree or key not in self.tree[section]:
            raise CliError(f"config: unknown key {dotted}")
        self.tree[section][key] = _coerce(raw, DEFAULTS[section][key])
        self.validate()

    def serialize(self) -> str:
        return json.dumps(self.tree, sort_keys=True, indent=1)

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        try:
            tree = json.loads(text)
        except json.JSONDecodeError as e:
            raise CliError(f"config: invalid JSON ({e})")
        return cls(tree)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                return cls.parse(f.read())
        except OSError as e:
            raise CliError(f"config: cannot read {path}: {e}")

    def model_config(self) -> ModelConfig:
        d = dict(self.tree["model"])
        d["control_mode"] = self.tree["control"]["mode"]
        try:
            return ModelConfig.from_dict(d)
        except ValueError as e:
            raise CliError(str(e))


def _config_from(args) -> RunConfig:
    cfg = (RunConfig.from_file(args.config) if getattr(args, "config", None)
           else RunConfig())
    for dotted in getattr(args, "set", None) or []:
        if "=" not in dotted:
            raise CliError(f"--set wants section.key=value, got {dotted!r}")
        path, raw = dotted.split("=", 1)
        cfg.override(path, raw)
    # explicit flags win over both the file and --set
    for flag, dotted in (("steps", "train.steps"),
                         ("batch_size", "train.batch_size"),
                         ("lr", "train.lr"),
                         ("weight_decay", "train.weight_decay"),
                         ("clip_norm", "train.clip_norm"),
                         ("seed", "train.seed"),
                         ("checkpoint_interval", "train.checkpoint_interval"),
                         ("data", "data.path"),
                         ("control_mode", "control.mode"),
                         ("split", "eval.split"),
                         ("eval_seed", "eval.seed"),
                         ("eval_batch", "eval.batch"),
                         ("eval_samples", "eval.samples")):
        val = getattr(args, flag, None)
        if val is not None:
            section, key = dotted.split(".")
            cfg.tree[section][key] = val
    cfg.validate()
    return cfg


def worker_count() -> int:
    """Worker parallelism: cpu count, capped by MBCT_THREADS."""
    n = os.cpu_count() or 1
    cap = os.environ.get("MBCT_THREADS")
    if cap is not None:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise CliError(f"MBCT_THREADS is not an integer: {cap!r}")
    return max(1, n)


# ---------------------------------------------------------------------------
# shared helpers


def _load_split(data_path, split):
    try:
        subjects = SD.read_dataset(data_path)
        manifest = SD.read_manifest(os.path.join(data_path, "manifest.json"))
    except (OSError, ValueError, FileNotFoundError) as e:
        raise CliError(f"dataset at {data_path}: {e}")
    ids = set(manifest.split(split))
    picked = [s for s in subjects if s.id in ids]
    if not picked:
        raise CliError(f"split {split!r} is empty")
    return picked


def _find_subject(subjects, sid):
    for s in subjects:
        if s.id == sid:
            return s
    raise CliError(f"no subject {sid!r} in the dataset")


def _write_pgm(path, img, scale=4):
    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    a = np.repeat(np.repeat(a, scale, axis=0), scale, axis=1)
    b = np.round(a * 255.0).astype(np.uint8)
    header = f"P5\n{b.shape[1]} {b.shape[0]}\n255\n".encode("ascii")
    _atomic_write(path, header + b.tobytes())


def _preview_grid(prior, pred, gt):
    resid = np.clip(np.abs(pred - gt), 0.0, 1.0)
    sep = np.ones((prior.shape[0], 1))
    return np.concatenate(
        [prior, sep, pred, sep, gt, sep, resid], axis=1)


def _write_loss_csv(path, rows):
    lines = ["step,loss"] + [f"{s},{v}" for s, v in rows]
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    cfg = _config_from(args)
    subjects = args.subjects if args.subjects is not None \
        else cfg["data"]["cohort_size"]
    size = args.size if args.size is not None else cfg["data"]["image_size"]
    out = args.out if args.out is not None else cfg["data"]["path"]
    parent = os.path.dirname(os.path.abspath(out))
    if not os.path.isdir(parent):
        raise CliError(f"parent directory {parent} does not exist")
    geom = SD.Geometry(size)
    cohort = SD.generate_cohort(args.seed, subjects, geom,
                                n_visits=args.visits)
    manifest = SD.make_splits(cohort, seed=args.seed, geometry=geom)
    os.makedirs(out, exist_ok=True)
    SD.write_dataset(out, cohort)
    SD.write_manifest(os.path.join(out, "manifest.json"), manifest)
    print(f"wrote {len(cohort)} subjects x {args.visits} visits "
          f"({size}x{size}) to {out}")
    print(f"splits: train={len(manifest.train)} val={len(manifest.val)} "
          f"test={len(manifest.test)}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = _config_from(args)
    tr = cfg["train"]
    out = args.out
    os.makedirs(out, exist_ok=True)
    _atomic_write(os.path.join(out, "config.json"),
                  cfg.serialize().encode("utf-8"))

    subjects = _load_split(cfg["data"]["path"], "train")
    pairs = [p for s in subjects for p in s.pairs()]
    if not pairs:
        raise CliError("no training pairs in the train split")

    mcfg = cfg.model_config()
    model = DualPathModel(mcfg, seed=int(tr["seed"]))
    sched = make_schedule(mcfg.t_steps)
    opt = AdamW(model.named_parameters(), lr=float(tr["lr"]),
                weight_decay=float(tr["weight_decay"]),
                clip_norm=float(tr["clip_norm"]))
    rng = np.random.default_rng(int(tr["seed"]))
    counts = count_parameters(model)
    print(f"training {cfg['control']['mode']} arm: "
          f"{counts['total']} parameters "
          f"({counts['diffusion']} diffusion, {counts['control']} control), "
          f"{len(pairs)} pairs, {tr['steps']} steps", file=sys.stderr)

    steps = int(tr["steps"])
    interval = int(tr["checkpoint_interval"])
    losses = []
    loss_csv = os.path.join(out, "loss.csv")
    for step in range(steps):
        T.reset_tape()
        idx = rng.integers(0, len(pairs), size=int(tr["batch_size"]))
        x0 = np.stack([pairs[i][3] for i in idx])
        conds = [Condition(pairs[i][0], pairs[i][1], pairs[i][2])
                 for i in idx]
        loss = training_loss(x0, conds, model, sched, rng)
        lv = float(loss.data)
        if not np.isfinite(lv):
            _write_loss_csv(loss_csv, losses)
            raise CliError(f"aborting at step {step}: non-finite loss")
        T.backward(loss)
        try:
            opt.step()
        except NonFiniteGradient as e:
            _write_loss_csv(loss_csv, losses)
            raise CliError(f"aborting at step {step}: {e}")
        opt.zero_grad()
        losses.append((step, lv))
        if interval and (step + 1) % interval == 0 and step + 1 < steps:
            save_checkpoint(
                os.path.join(out, f"ckpt_step{step + 1:05d}.mbct"), model)
        if step % 100 == 0 or step == steps - 1:
            print(f"step {step}: loss {lv:.4f}", file=sys.stderr)
    T.reset_tape()
    save_checkpoint(os.path.join(out, "ckpt_final.mbct"), model)
    _write_loss_csv(loss_csv, losses)
    tail = np.mean([v for _, v in losses[-100:]])
    print(f"done: {steps} steps, mean loss over final "
          f"{min(100, steps)} steps = {tail:.4f}")
    print(f"checkpoint: {os.path.join(out, 'ckpt_final.mbct')}")
    return 0


# ---------------------------------------------------------------------------
# predict


def _visit_pair(subject, visit: int):
    if visit < 1:
        raise CliError(f"visit index must be >= 1 (needs a prior scan), "
                       f"got {visit}")
    if visit >= len(subject.visits):
        raise CliError(f"subject {subject.id} has "
                       f"{len(subject.visits)} visits; no visit {visit}")
    ages = subject.ages()
    prior = subject.visits[visit - 1][1]
    gt = subject.visits[visit][1]
    dage = (ages[visit] - ages[visit - 1]) / SD.AGE_SCALE
    return prior, gt, Condition(prior, dage, subject.sex)


def cmd_predict(args) -> int:
    model = load_model(args.checkpoint)
    sched = make_schedule(model.config.t_steps)
    try:
        subjects = SD.read_dataset(args.data)
    except (OSError, ValueError, FileNotFoundError) as e:
        raise CliError(f"dataset at {args.data}: {e}")
    subject = _find_subject(subjects, args.subject)
    prior, gt, cond = _visit_pair(subject, args.visit)

    rng = np.random.default_rng(args.seed)
    pred = sample(model, [cond], sched, rng)[0]
    pred = np.float64(np.float32(pred))
    SD.write_image(args.out, pred)
    print(f"wrote {args.out} ({pred.shape[0]}x{pred.shape[1]})")
    if args.preview:
        _write_pgm(args.preview, _preview_grid(prior, pred, gt))
        print(f"preview (prior | predicted | ground truth | residual): "
              f"{args.preview}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _eval_jobs(subjects):
    jobs = []
    for s in subjects:
        for k in range(1, len(s.visits)):
            prior, gt, cond = _visit_pair(s, k)
            jobs.append((s.id, k, cond, gt, s.masks[k]))
    return jobs


def cmd_evaluate(args) -> int:
    cfg = _config_from(args)
    ev = cfg["eval"]
    oracle = bool(args.oracle)
    if not oracle and not args.checkpoint:
        raise CliError("evaluate needs --checkpoint (or --oracle)")
    subjects = _load_split(cfg["data"]["path"], ev["split"])
    jobs = _eval_jobs(subjects)
    out_csv = args.out if args.out is not None else ev["output_csv"]

    preds = [None] * len(jobs)
    if oracle:
        for i, job in enumerate(jobs):
            preds[i] = job[3]
    else:
        model = load_model(args.checkpoint)
        sched = make_schedule(model.config.t_steps)
        bsz = int(ev["batch"])
        navg = int(ev["samples"])
        chunks = [(c, list(range(i, min(i + bsz, len(jobs)))))
                  for c, i in enumerate(range(0, len(jobs), bsz))]

        def run_chunk(chunk):
            # the scored prediction is the mean over eval.samples draws:
            # a posterior-mean estimate, not one stochastic trajectory
            c, idxs = chunk
            conds = [jobs[i][2] for i in idxs]
            acc = None
            for j in range(navg):
                rng = np.random.default_rng((int(ev["seed"]), c, j))
                imgs = sample(model, conds, sched, rng)
                acc = imgs if acc is None else acc + imgs
            for i, img in zip(idxs, acc / navg):
                preds[i] = np.float64(np.float32(img))

        workers = worker_count()
        # hold recording off on the main thread for the whole fan-out;
        # the flag is global, so worker-local toggling alone could race
        with T.no_grad():
            if workers == 1 or len(chunks) == 1:
                for chunk in chunks:
                    run_chunk(chunk)
            else:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    list(pool.map(run_chunk, chunks))

    report = EvalReport()
    for (sid, k, _, gt, masks), pred in zip(jobs, preds):
        brain = SD.brain_mask(gt)
        report.add(sid, f"{k - 1}-{k}",
                   score_pair(pred, gt, masks, brain))
    report.write_csv(out_csv)
    print(report.format_summary())
    print(f"report: {out_csv}")
    return 0


# ---------------------------------------------------------------------------
# inspect-graph


def _write_matrix_csv(path, mat):
    n = mat.shape[1]
    lines = ["node," + ",".join(f"n{j}" for j in range(n))]
    for i in range(mat.shape[0]):
        lines.append(f"n{i}," + ",".join(str(x) for x in mat[i]))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def cmd_inspect_graph(args) -> int:
    model = load_model(args.checkpoint)
    if model.ctrl_in_proj is None:
        raise CliError("checkpoint was trained with control.mode none; "
                       "it has no graph pathway to inspect")
    if args.image:
        try:
            img = SD.read_image(args.image)
        except (OSError, ValueError) as e:
            raise CliError(f"{args.image}: {e}")
    else:
        if not (args.data and args.subject):
            raise CliError("inspect-graph needs --image, or --data with "
                           "--subject (and optionally --visit)")
        subjects = SD.read_dataset(args.data)
        subject = _find_subject(subjects, args.subject)
        visit = args.visit if args.visit is not None else 0
        if not 0 <= visit < len(subject.visits):
            raise CliError(f"subject {subject.id} has no visit {visit}")
        img = subject.visits[visit][1]
    if img.shape != (model.config.image_size, model.config.image_size):
        raise CliError(f"image shape {img.shape} does not match the "
                       f"checkpoint's {model.config.image_size}")

    # stage-0 control graph for a clean image: x_t = prior = img at t = 1
    cond = Condition(img, args.age_delta, args.sex)
    with T.no_grad():
        tokens_in, cov = model._lift_inputs(img[None], [cond])
        temb = model._temb(np.array([1]), cov)
        bsz, n, _ = tokens_in.shape
        flat = T.reshape(tokens_in, (bsz * n, tokens_in.shape[2]))
        x = T.reshape(T.matmul(flat, model.ctrl_in_proj),
                      (bsz, n, model.config.dim))
        st = model.ctrl_stages[0]
        tproj = T.matmul(temb, st.w_t)
        x = T.add(x, T.broadcast_to(
            T.reshape(tproj, (bsz, 1, x.shape[2])), x.shape))
        enc = gated_encode(x, st.encoder)
        enc_n = T.layer_norm(enc, st.ln_g, st.ln_b)
        feats = enc_n.data[0] * (x.shape[2] ** -0.5)
    a_d = build_adjacency(feats)
    lap, _, _ = normalized_laplacian(a_d)
    _, evals = eigendecompose(lap)

    os.makedirs(args.out, exist_ok=True)
    _write_matrix_csv(os.path.join(args.out, "adjacency.csv"), a_d)
    _write_matrix_csv(os.path.join(args.out, "laplacian.csv"), lap)
    lines = ["index,eigenvalue"]
    lines += [f"{i},{v}" for i, v in enumerate(evals)]
    _atomic_write(os.path.join(args.out, "eigenvalues.csv"),
                  ("\n".join(lines) + "\n").encode("utf-8"))
    print(f"{a_d.shape[0]} nodes; eigenvalues in "
          f"[{evals[0]:.6f}, {evals[-1]:.6f}]")
    print(f"wrote adjacency.csv, laplacian.csv, eigenvalues.csv to "
          f"{args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="progdiff",
        description="Longitudinal image progression with a graph-guided "
                    "state-space diffusion model.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic cohort")
    _add_config_flags(g)
    g.add_argument("--subjects", type=int, help="cohort size")
    g.add_argument("--visits", type=int, default=5, help="visits per subject")
    g.add_argument("--size", type=int, help="image side length")
    g.add_argument("--seed", type=int, default=0, help="generation seed")
    g.add_argument("--out", help="output dataset directory")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train the denoiser on visit pairs")
    _add_config_flags(t)
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--out", default="run", help="output run directory")
    t.add_argument("--steps", type=int, help="training steps")
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float, help="learning rate")
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--clip-norm", dest="clip_norm", type=float)
    t.add_argument("--seed", type=int, help="training seed")
    t.add_argument("--checkpoint-interval", dest="checkpoint_interval",
                   type=int)
    t.add_argument("--control-mode", dest="control_mode",
                   choices=CONTROL_CHOICES, help="ablation arm")
    t.set_defaults(fn=cmd_train)

    pr = sub.add_parser("predict",
                        help="sample one follow-up image for a subject")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True, help="dataset directory")
    pr.add_argument("--subject", required=True, help="subject id")
    pr.add_argument("--visit", type=int, required=True,
                    help="visit to predict (>= 1; uses visit-1 as prior)")
    pr.add_argument("--seed", type=int, default=0, help="sampling seed")
    pr.add_argument("--out", default="pred.img", help="output image file")
    pr.add_argument("--preview",
                    help="also write a PGM grid: prior | predicted | "
                         "ground truth | residual")
    pr.set_defaults(fn=cmd_predict)

    e = sub.add_parser("evaluate", help="score a split pair by pair")
    _add_config_flags(e)
    e.add_argument("--checkpoint", help="trained checkpoint")
    e.add_argument("--data", help="dataset directory")
    e.add_argument("--split", choices=("train", "val", "test"))
    e.add_argument("--out", help="output CSV path")
    e.add_argument("--eval-seed", dest="eval_seed", type=int,
                   help="sampling seed")
    e.add_argument("--eval-batch", dest="eval_batch", type=int,
                   help="sampling batch size")
    e.add_argument("--eval-samples", dest="eval_samples", type=int,
                   help="draws averaged into each scored prediction")
    e.add_argument("--oracle", action="store_true",
                   help="score ground truth against itself")
    e.set_defaults(fn=cmd_evaluate)

    ig = sub.add_parser("inspect-graph",
                        help="dump a checkpoint's patch graph for an image")
    ig.add_argument("--checkpoint", required=True)
    ig.add_argument("--image", help=".img file to build the graph from")
    ig.add_argument("--data", help="dataset directory (with --subject)")
    ig.add_argument("--subject", help="subject id")
    ig.add_argument("--visit", type=int, help="visit index (default 0)")
    ig.add_argument("--age-delta", dest="age_delta", type=float, default=0.0,
                    help="age covariate fed to the encoder")
    ig.add_argument("--sex", type=int, default=0, choices=(0, 1),
                    help="sex covariate fed to the encoder")
    ig.add_argument("--out", default="graph", help="output directory")
    ig.set_defaults(fn=cmd_inspect_graph)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
