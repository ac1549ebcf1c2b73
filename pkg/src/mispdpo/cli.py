"""Command-line entry point: ``misp-dpo <subcommand> ...``."""

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, replace

import numpy as np

from mispdpo import __version__, config as cfgmod, io, negselect, pl_dpo, sae, toy_lab
from mispdpo.embed_core import cap_dimension, difference_matrix, fuse_rows, project_2d
from mispdpo.errors import CheckFailure, ConfigError, DataError, DimensionError, InsufficientDataError, MispError

EXIT_OK = 0
EXIT_CONFIG = ConfigError.exit_code
EXIT_DATA = DataError.exit_code
EXIT_DIVERGED = 4
EXIT_CHECK = CheckFailure.exit_code

EPILOG = f"""exit codes:
  {EXIT_OK}  success
  {EXIT_CONFIG}  configuration or usage error
  {EXIT_DATA}  data error (missing/malformed input, id or dimension mismatch)
  {EXIT_DIVERGED}  numeric divergence during training
  {EXIT_CHECK}  gradient check failed

The default seed comes from ${cfgmod.SEED_ENV}; --seed overrides it."""

GRAD_CHECK_TOLERANCE = 1e-5


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunRecorder:
    """Collects the RunRecord written next to a command's primary output."""

    def __init__(self, command, cfg=None):
        self.command = command
        self.cfg = cfg
        self.inputs = {}
        self.outputs = []
        self.start = time.time()
        self.extra = {}

    def input(self, path):
        if path is not None:
            self.inputs[os.fspath(path)] = sha256(path)
        return path

    def output(self, path):
        self.outputs.append(os.fspath(path))
        return path

    def write(self, primary):
        record = {
            "command": self.command,
            "config": self.cfg.to_dict() if hasattr(self.cfg, "to_dict") else self.cfg,
            "input_digests": self.inputs,
            "tool_version": __version__,
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(self.start)),
            "duration_s": time.time() - self.start,
            "outputs": self.outputs,
            **self.extra,
        }
        with open(f"{os.fspath(primary)}.run.json", "w") as fh:
            json.dump(record, fh, indent=2, default=str)


def _pipeline_config(args):
    names = set(cfgmod.field_names()) | {"seed"}
    overrides = {k: v for k, v in vars(args).items() if k in names and v is not None}
    return cfgmod.load_config(getattr(args, "config", None), overrides)


def _require(path, what):
    if path is None or not os.path.exists(path):
        raise DataError(f"missing {what}: {path}")
    return path


# -- subcommands --------------------------------------------------------------

def cmd_fuse(args):
    rec = RunRecorder("fuse", vars(args))
    img = io.load_embeddings(rec.input(_require(args.image, "image embedding file")))
    txt = io.load_embeddings(rec.input(_require(args.text, "text embedding file")))
    matched = [i for i in img.ids if i in txt.index]
    only_img = [i for i in img.ids if i not in txt.index]
    only_txt = [i for i in txt.ids if i not in img.index]
    if only_img or only_txt:
        print(f"unmatched ids: {len(only_img)} image-only {only_img[:10]}, "
              f"{len(only_txt)} text-only {only_txt[:10]}", file=sys.stderr)
    if not matched:
        raise DataError("no ids in common between the image and text files")
    if (only_img or only_txt) and not args.allow_partial:
        raise DataError("id mismatch between image and text files (use --allow-partial to fuse the overlap)")
    fused = fuse_rows(
        np.array([img.row(i) for i in matched]),
        np.array([txt.row(i) for i in matched]),
        normalize=args.normalize,
    )
    fused = cap_dimension(fused, args.dim_cap, args.project_dim, args.seed or 0, enabled=args.cap)
    io.write_binary(rec.output(args.output), fused, matched)
    rec.write(args.output)
    print(f"fused {len(matched)} pairs -> {args.output} ({fused.shape[1]} dims)")
    return EXIT_OK


def cmd_train_sae(args):
    cfg = _pipeline_config(args)
    rec = RunRecorder("train-sae", cfg)
    data = io.load_embeddings(rec.input(_require(args.diffs, "difference-vector file")))
    if len(data) == 0:
        raise InsufficientDataError("difference-vector file is empty")
    sae_cfg = cfg.sae_config(data.dim)
    rec.extra["sae_config"] = asdict(sae_cfg)
    log = (lambda e, loss: print(f"epoch {e:4d}  loss {loss:.6f}")) if args.verbose else None
    result = sae.train(sae_cfg, data.matrix, log=log)
    sae.save_checkpoint(result.model, rec.output(args.checkpoint))
    history_path = args.history or f"{args.checkpoint}.history.json"
    with open(rec.output(history_path), "w") as fh:
        json.dump(result.history_dict(), fh)
    if not args.no_plot:
        from mispdpo import plots

        plots.loss_curve(result.history, rec.output(f"{args.checkpoint}.loss.png"), result.initial_loss)
    rec.write(args.checkpoint)
    final = result.history[-1] if result.history else result.initial_loss
    print(f"trained SAE ({sae_cfg.epochs} epochs): loss {result.initial_loss:.6f} -> {final:.6f}")
    return EXIT_OK


def _read_labels(path):
    labels = {}
    for rec in io.read_jsonl_records(path):
        labels[str(rec["id"])] = rec["factor"]
    return labels


def cmd_select(args):
    cfg = _pipeline_config(args)
    rec = RunRecorder("select", cfg)
    pos = io.load_embeddings(rec.input(_require(args.positives, "positive fused file")))
    cand = io.load_embeddings(rec.input(_require(args.candidates, "candidate fused file")))
    model = sae.load_checkpoint(rec.input(_require(args.checkpoint, "SAE checkpoint")))
    labels = _read_labels(rec.input(args.labels)) if args.labels else None
    if len(cand) == 0:
        raise InsufficientDataError("empty candidate pool")
    for name, table in (("positive", pos), ("candidate", cand)):
        if table.dim != model.config.input_dim:
            raise DimensionError(f"{name} dimension {table.dim} != checkpoint input_dim {model.config.input_dim}")
    manifests = []
    for pid in pos.ids:
        m = negselect.select_negatives(model, pos.row(pid), cand.matrix, cand.ids, cfg.selection,
                                       prompt_id=pid, positive_id=pid, labels=labels)
        manifests.append(m.to_dict())
    io.write_jsonl_records(rec.output(args.output), manifests)
    rec.write(args.output)
    print(f"wrote {len(manifests)} selection manifests -> {args.output}")
    return EXIT_OK


def cmd_train_toy(args):
    cfg = _pipeline_config(args)
    toy_cfg = cfg.toy_config()
    rec = RunRecorder("train-toy", cfg)
    run = toy_lab.run_toy_training(toy_cfg)
    io.write_jsonl_records(rec.output(args.output), run.trace)
    if not args.no_plot:
        from mispdpo import plots

        plots.toy_trace(run.trace, rec.output(f"{args.output}.png"))
    rec.write(args.output)
    last = run.final
    print(f"step {last['step']}: loss {last['loss']:.6f} margin {last['margin']:.6f} coverage {last['coverage']:.2f}")
    return EXIT_OK


def grad_check_sae(seed):
    from mispdpo import gradcheck

    rng = np.random.default_rng(seed)
    worst = 0.0
    for gamma in (0.0, 1.0, 10.0):
        cfg = sae.SaeConfig(input_dim=10, hidden_dim=8, sparsity_weight=gamma, seed=seed)
        m = sae.init_model(cfg)
        m.encoder_bias[:] = rng.normal(size=8)
        m.decoder_bias[:] = rng.normal(size=10)
        x = rng.normal(size=(6, 10))
        errs = gradcheck.check_arrays(lambda: sae.sae_loss(m, x)[0], m.params(), sae.sae_grad(m, x),
                                      n_samples=200, rng=rng)
        worst = max(worst, float(errs.max()))
    return worst


def _toy_comparison(rng, n_neg=3, features=8, vocab=16):
    policy = toy_lab.ToyPolicy(0.5 * rng.normal(size=(vocab, features)))
    ref = toy_lab.ToyPolicy(0.5 * rng.normal(size=(vocab, features)))
    y = tuple(int(t) for t in rng.integers(0, vocab, size=4))
    y_bad = tuple(int(t) for t in rng.integers(0, vocab, size=4))
    pos = toy_lab.ToyContext(rng.normal(size=features), y)
    negs = [toy_lab.ToyContext(rng.normal(size=features), y) for _ in range(n_neg)]
    text_neg = toy_lab.ToyContext(pos.features, y_bad)
    comp = pl_dpo.ImageComparison(pos, negs, ref.logprob(pos), [ref.logprob(c) for c in negs],
                                  pos, text_neg, ref.logprob(pos), ref.logprob(text_neg))
    return policy, comp


def grad_check_pl_dpo(seed):
    from mispdpo import gradcheck

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(5):
        policy, comp = _toy_comparison(rng)
        dpo = pl_dpo.DpoConfig()
        grad = pl_dpo.total_gradient(policy, comp, dpo)

        def f():
            return pl_dpo.total_loss(pl_dpo.instance_from_policy(policy, comp), dpo)

        errs = gradcheck.check_arrays(f, [policy.weights], [grad])
        worst = max(worst, float(errs.max()))
    return worst


def grad_check_toy(seed):
    from mispdpo import gradcheck

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(5):
        policy, comp = _toy_comparison(rng)
        ctx = comp.pos_context
        errs = gradcheck.check_arrays(lambda: policy.logprob(ctx), [policy.weights], [policy.logprob_grad(ctx)])
        worst = max(worst, float(errs.max()))
    return worst


GRAD_CHECKS = {"sae": grad_check_sae, "pl_dpo": grad_check_pl_dpo, "toy": grad_check_toy}


def cmd_grad_check(args):
    seed = _pipeline_config(args).seed
    scopes = list(GRAD_CHECKS) if args.scope == "all" else [args.scope]
    failed = False
    for scope in scopes:
        worst = GRAD_CHECKS[scope](seed)
        ok = worst < GRAD_CHECK_TOLERANCE
        failed |= not ok
        print(f"{scope:7s} max relative error {worst:.3e}  {'PASS' if ok else 'FAIL'}")
    if failed:
        raise CheckFailure(f"gradient check exceeded {GRAD_CHECK_TOLERANCE:g}")
    return EXIT_OK


def cmd_export_viz(args):
    rec = RunRecorder("export-viz", vars(args))
    manifests = [negselect.SelectionManifest.from_dict(d)
                 for d in io.read_jsonl_records(rec.input(_require(args.manifest, "selection manifest")))]
    if not manifests:
        raise DataError("manifest file is empty")
    if args.positive_id is None:
        manifest = manifests[0]
    else:
        found = [m for m in manifests if m.positive_id == args.positive_id]
        if not found:
            raise DataError(f"no manifest for positive {args.positive_id!r}")
        manifest = found[0]
    cand = io.load_embeddings(rec.input(_require(args.candidates, "candidate fused file")))
    rows = cand.matrix
    if args.positives:
        pos = io.load_embeddings(rec.input(args.positives))
        rows = difference_matrix(pos.row(manifest.positive_id), rows)
    if args.checkpoint:
        model = sae.load_checkpoint(rec.input(args.checkpoint))
        rows = sae.encode(model, rows)
    proj = project_2d(rows)
    rank = {cid: n + 1 for n, cid in enumerate(manifest.ids)}
    missing = [i for i in rank if i not in cand.index]
    if missing:
        raise DataError(f"selected ids missing from candidate file: {missing}")
    with open(rec.output(args.output), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y", "selected", "rank"])
        for cid, (x, y) in zip(cand.ids, proj.points):
            w.writerow([cid, repr(float(x)), repr(float(y)), int(cid in rank), rank.get(cid, "")])
    if not args.no_plot:
        from mispdpo import plots

        selected = [cid in rank for cid in cand.ids]
        plots.selection_scatter(proj.points, selected, rec.output(f"{args.output}.png"), labels=cand.ids)
    rec.write(args.output)
    print(f"exported {len(cand)} points ({len(rank)} selected) -> {args.output}")
    return EXIT_OK


def cmd_synth(args):
    seed = _pipeline_config(args).seed
    os.makedirs(args.out_dir, exist_ok=True)
    rec = RunRecorder("synth", vars(args))
    out = lambda name: rec.output(os.path.join(args.out_dir, name))  # noqa: E731
    if args.kind == "sparse":
        x = sae.make_sparse_dataset(n_rows=args.rows, dim=args.dim, seed=seed)
        io.write_binary(out("diffs.bin"), x, [f"d{i}" for i in range(len(x))])
    elif args.kind == "planted":
        spec = toy_lab.PlantedFactorSpec(args.factors, args.per_factor, args.noise, seed, args.dim, args.scale)
        pool = toy_lab.make_planted_pool(spec)
        corpus = toy_lab.make_planted_pool(replace(spec, samples_per_factor=args.train_per_factor))
        io.write_binary(out("positives.bin"), pool.positive[None, :], ["p0"])
        io.write_binary(out("candidates.bin"), pool.candidates, pool.ids)
        io.write_binary(out("diffs.bin"), corpus.diffs, corpus.ids)
        io.write_jsonl_records(out("labels.jsonl"), [{"id": i, "factor": k} for i, k in zip(pool.ids, pool.labels)])
    else:
        rng = np.random.default_rng(seed)
        ids = [f"x{i}" for i in range(args.rows)]
        io.write_jsonl(out("image.jsonl"), ids, rng.normal(size=(args.rows, args.dim)))
        io.write_jsonl(out("text.jsonl"), ids, rng.normal(size=(args.rows, args.text_dim)))
    rec.write(os.path.join(args.out_dir, "synth"))
    print(f"wrote {args.kind} dataset to {args.out_dir}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="YAML/JSON config file; flags override its values")
    p.add_argument("--seed", type=int, help=f"random seed (default ${cfgmod.SEED_ENV} or 0)")


def _add_sae_flags(p):
    g = p.add_argument_group("SAE")
    g.add_argument("--hidden-dim", type=int)
    g.add_argument("--sparsity-weight", type=float)
    g.add_argument("--target-activation", type=float)
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--optimizer", choices=["adam", "sgd"])


def _add_selection_flags(p):
    g = p.add_argument_group("selection")
    g.add_argument("--k", type=int, help="negatives to select per positive")
    g.add_argument("--diversity-weight", type=float)


def _add_dpo_flags(p):
    g = p.add_argument_group("preference loss")
    g.add_argument("--beta", type=float)
    g.add_argument("--lam", type=float, help="weight of the text loss")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="misp-dpo",
        description="Multi-negative preference optimization and SAE-guided negative selection.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("fuse", help="fuse image and text embeddings by id", epilog=EPILOG, formatter_class=fmt)
    p.add_argument("--image", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--normalize", action="store_true", help="L2-normalize embeddings before fusing")
    p.add_argument("--allow-partial", action="store_true", help="fuse the id overlap instead of failing")
    p.add_argument("--cap", action="store_true", help="enable the random-sign dimensionality cap")
    p.add_argument("--dim-cap", type=int, default=65_536)
    p.add_argument("--project-dim", type=int, default=4096)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("train-sae", help="train the sparse autoencoder", epilog=EPILOG, formatter_class=fmt)
    _add_common(p)
    p.add_argument("--diffs", required=True, help="difference-vector embedding file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--history", help="loss-history JSON (default <checkpoint>.history.json)")
    p.add_argument("--no-plot", action="store_true")
    p.add_argument("--verbose", action="store_true")
    _add_sae_flags(p)
    p.set_defaults(func=cmd_train_sae)

    p = sub.add_parser("select", help="score and greedily select negatives", epilog=EPILOG, formatter_class=fmt)
    _add_common(p)
    p.add_argument("--positives", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--labels", help="JSON-lines {id, factor}; adds a coverage field to manifests")
    _add_selection_flags(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("train-toy", help="train the toy policy on the planted task", epilog=EPILOG,
                       formatter_class=fmt)
    _add_common(p)
    p.add_argument("--output", required=True, help="metric trace (JSON-lines)")
    p.add_argument("--no-plot", action="store_true")
    p.add_argument("--steps", type=int)
    p.add_argument("--sampler", choices=list(toy_lab.SAMPLERS))
    p.add_argument("--toy-learning-rate", type=float)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-heldout", type=int)
    _add_selection_flags(p)
    _add_dpo_flags(p)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks", epilog=EPILOG, formatter_class=fmt)
    _add_common(p)
    p.add_argument("--scope", required=True, choices=[*GRAD_CHECKS, "all"])
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("export-viz", help="2-D PCA export of a selection", epilog=EPILOG, formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--positives", help="project difference vectors against this positive file")
    p.add_argument("--checkpoint", help="project SAE codes instead of raw vectors")
    p.add_argument("--positive-id", help="manifest to export (default: first)")
    p.add_argument("--output", required=True, help="CSV of 2-D points")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_export_viz)

    p = sub.add_parser("synth", help="emit synthetic datasets", epilog=EPILOG, formatter_class=fmt)
    _add_common(p)
    p.add_argument("--kind", choices=["planted", "sparse", "embeddings"], default="planted")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--rows", type=int, default=2000, help="rows for sparse/embeddings")
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--text-dim", type=int, default=8)
    p.add_argument("--factors", type=int, default=4)
    p.add_argument("--per-factor", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--scale", type=float, default=5.0, help="planted centroid norm")
    p.add_argument("--train-per-factor", type=int, default=250, help="SAE training rows per planted factor")
    p.set_defaults(func=cmd_synth)
    return parser


SYNTH_DIMS = {"sparse": 256, "planted": 16, "embeddings": 8}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "synth" and args.dim is None:
        args.dim = SYNTH_DIMS[args.kind]
    try:
        return args.func(args)
    except MispError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
