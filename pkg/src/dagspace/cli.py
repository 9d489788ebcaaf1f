"""Command-line entry points.

Each verb is a batch run: it locks its output directory, writes a manifest
(command, resolved config, seed, version, named outputs) before any long
computation, runs, and finalizes the manifest with wall-clock timings.
Given the same seed and inputs every command reproduces its outputs
byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from typing import Optional

import numpy as np

from . import __version__
from . import dag as dg
from . import encoder as enc_mod
from . import gpbo, scoring, vae


class OutputDirLock:
    """Guards an output directory against concurrent writers via an
    exclusively-created lock file."""

    def __init__(self, out_dir: str):
        self.path = os.path.join(out_dir, ".lock")
        self.fd: Optional[int] = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise SystemExit(
                f"output directory is locked by another run ({self.path}); "
                "remove the lock file if that run is dead")
        os.write(self.fd, f"{os.getpid()}\n".encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            os.remove(self.path)
        return False


class Manifest:
    """Run record written before the work starts and finalized at exit."""

    def __init__(self, out_dir: str, command: str, config: dict, seed: Optional[int]):
        self.out_dir = out_dir
        self.path = os.path.join(out_dir, "manifest.json")
        self.started = time.time()
        self.doc = {
            "command": command,
            "config": config,
            "seed": seed,
            "version": __version__,
            "outputs": [],
            "status": "running",
            "elapsed_seconds": None,
        }
        self.write()

    def output_path(self, name: str) -> str:
        if name not in self.doc["outputs"]:
            self.doc["outputs"].append(name)
            self.write()
        return os.path.join(self.out_dir, name)

    def finish(self, status: str = "ok"):
        self.doc["status"] = status
        self.doc["elapsed_seconds"] = time.time() - self.started
        self.write()

    def write(self):
        with open(self.path, "w") as fh:
            json.dump(self.doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def resolve_config(args, keys) -> dict:
    """Flat key/value config file, overridden by any explicitly-set flags."""
    cfg = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise SystemExit(f"{args.config}: config must be a flat JSON object")
        cfg.update(doc)
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_model(checkpoint_path: str) -> vae.Model:
    return vae.load_model(checkpoint_path)


def _dataset_scores(dags, scores, domain):
    """Use stored scores when present, otherwise score against the oracle."""
    if scores is not None:
        return np.asarray(scores, dtype=np.float64)
    oracle = _oracle(domain)
    return np.asarray([oracle(d) for d in dags], dtype=np.float64)


def _oracle(domain: str):
    if domain == dg.DOMAIN_BN:
        return scoring.make_oracle(domain, scoring.committed_bn_data())
    return scoring.make_oracle(domain)


def _decode_fn(model: vae.Model):
    """Latent point -> stored-form dag (virtual endpoints stripped)."""

    def fn(z, rng):
        d = model.decode(z, rng)
        if model.domain == dg.DOMAIN_BN or model.vocab.virtual_endpoints:
            d = dg.strip_virtual_endpoints(d, model.vocab)
        return d

    return fn


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args, (
        "domain", "count", "seed", "test_fraction", "min_layers",
        "max_layers", "skip_prob", "edge_prob"))
    cfg.setdefault("domain", dg.DOMAIN_BN)
    cfg.setdefault("count", 2000)
    cfg.setdefault("seed", 0)
    cfg.setdefault("test_fraction", 0.1)
    cfg.setdefault("min_layers", 4)
    cfg.setdefault("max_layers", 8)
    cfg.setdefault("skip_prob", 0.4)
    cfg.setdefault("edge_prob", None)
    domain = cfg["domain"]
    vocab = dg.vocab_for_domain(domain)
    manifest = Manifest(args.out_dir, "gen-data", cfg, cfg["seed"])

    rng = np.random.default_rng(cfg["seed"])
    dags = []
    for _ in range(cfg["count"]):
        if domain == dg.DOMAIN_NN:
            n_layers = int(rng.integers(cfg["min_layers"], cfg["max_layers"] + 1))
            dags.append(dg.random_nn_dag(rng, n_layers, vocab, cfg["skip_prob"]))
        else:
            dags.append(dg.random_bn_dag(rng, edge_prob=cfg["edge_prob"], vocab=vocab))
    oracle = _oracle(domain)
    scores = [oracle(d) for d in dags]

    n_test = int(round(cfg["count"] * cfg["test_fraction"]))
    perm = rng.permutation(cfg["count"])
    test_idx = set(perm[:n_test].tolist())
    train = [(dags[i], scores[i]) for i in range(cfg["count"]) if i not in test_idx]
    test = [(dags[i], scores[i]) for i in range(cfg["count"]) if i in test_idx]

    dg.save_vocab(manifest.output_path("vocab.json"), vocab)
    dg.save_dataset(manifest.output_path("train.jsonl"),
                    [d for d, _ in train], vocab, [s for _, s in train])
    dg.save_dataset(manifest.output_path("test.jsonl"),
                    [d for d, _ in test], vocab, [s for _, s in test])
    if domain == dg.DOMAIN_BN:
        scoring.save_bn_data(manifest.output_path("bn_data.txt"),
                             scoring.committed_bn_data())
    manifest.finish()
    print(f"wrote {len(train)} train / {len(test)} test dags to {args.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# train


TRAIN_KEYS = ("domain", "alpha", "lr", "plateau_patience", "lr_decay",
              "batch_size", "epochs", "seed", "hidden", "latent",
              "bidirectional", "max_nodes")


def cmd_train(args) -> int:
    resume_path = args.resume
    if resume_path:
        state, config = vae.load_train_checkpoint(resume_path)
        if args.epochs is not None:
            config.epochs = args.epochs
        cfg = config.to_json_obj()
    else:
        state = None
        cfg = resolve_config(args, TRAIN_KEYS)
        config = vae.TrainConfig(**cfg)
        cfg = config.to_json_obj()
    manifest = Manifest(args.out_dir, "train", cfg, config.seed)
    vocab = dg.vocab_for_domain(config.domain)
    dataset, _ = dg.load_dataset(args.data, vocab)

    ckpt_path = manifest.output_path("checkpoint.json")
    loss_path = manifest.output_path("loss.csv")
    every = args.checkpoint_every

    def write_loss_csv(history):
        with open(loss_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss"])
            for epoch, loss in enumerate(history, 1):
                writer.writerow([epoch, repr(loss)])

    def on_epoch(st: vae.TrainState):
        if st.epoch % every == 0 or st.epoch == config.epochs:
            vae.save_train_checkpoint(ckpt_path, st, config)
            write_loss_csv(st.history)
        print(f"epoch {st.epoch}/{config.epochs} mean loss {st.history[-1]:.4f}",
              flush=True)

    vae.train(dataset, config, state=state, on_epoch=on_epoch)
    manifest.finish()
    print(f"trained {config.epochs} epochs; checkpoint at {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# eval-basic / eval-predictive


def cmd_eval_basic(args) -> int:
    cfg = {"checkpoint": args.checkpoint, "seed": args.seed or 0,
           "n_prior": args.n_prior}
    manifest = Manifest(args.out_dir, "eval-basic", cfg, cfg["seed"])
    model = _load_model(args.checkpoint)
    train_set, _ = dg.load_dataset(args.train, model.vocab)
    test_set, _ = dg.load_dataset(args.test, model.vocab)
    report = vae.evaluate_basic(model, train_set, test_set, cfg["seed"],
                                n_prior=cfg["n_prior"])
    _write_json(manifest.output_path("metrics.json"), report.to_json_obj())
    manifest.finish()
    for name, value in report.to_json_obj().items():
        print(f"{name}: {value}")
    return 0


def cmd_eval_predictive(args) -> int:
    cfg = {"checkpoint": args.checkpoint, "repeats": args.repeats}
    manifest = Manifest(args.out_dir, "eval-predictive", cfg, args.seed)
    model = _load_model(args.checkpoint)
    train_set, train_scores = dg.load_dataset(args.train, model.vocab)
    test_set, test_scores = dg.load_dataset(args.test, model.vocab)
    train_y = _dataset_scores(train_set, train_scores, model.domain)
    test_y = _dataset_scores(test_set, test_scores, model.domain)
    train_x = enc_mod.encode_many(train_set, model.encoder, model.vocab)
    test_x = enc_mod.encode_many(test_set, model.encoder, model.vocab)
    rmses, rs = [], []
    for _ in range(cfg["repeats"]):
        rmse, r = gpbo.predictive_eval(train_x, train_y, test_x, test_y)
        rmses.append(rmse)
        rs.append(r)
    report = {
        "repeats": cfg["repeats"],
        "rmse_mean": float(np.mean(rmses)),
        "rmse_std": float(np.std(rmses)),
        "pearson_r_mean": None if any(r is None for r in rs) else float(np.mean(rs)),
        "pearson_r_std": None if any(r is None for r in rs) else float(np.std(rs)),
    }
    _write_json(manifest.output_path("predictive.json"), report)
    manifest.finish()
    print(f"RMSE {report['rmse_mean']:.4f} ± {report['rmse_std']:.4f}; "
          f"Pearson r {report['pearson_r_mean']} ± {report['pearson_r_std']}")
    return 0


# ---------------------------------------------------------------------------
# bo


BO_KEYS = ("trials", "rounds", "batch_size", "pool_size", "xi", "seed",
           "seed_points", "noise_floor")


def cmd_bo(args) -> int:
    cfg = resolve_config(args, BO_KEYS)
    cfg.setdefault("trials", 5)
    cfg.setdefault("rounds", 10)
    cfg.setdefault("batch_size", 10)
    cfg.setdefault("pool_size", 2000)
    cfg.setdefault("xi", 0.01)
    cfg.setdefault("seed", 0)
    cfg.setdefault("seed_points", 500)
    cfg.setdefault("noise_floor", 1e-6)
    manifest = Manifest(args.out_dir, "bo", cfg, cfg["seed"])
    model = _load_model(args.checkpoint)
    train_set, train_scores = dg.load_dataset(args.train, model.vocab)
    train_y = _dataset_scores(train_set, train_scores, model.domain)
    finite = np.isfinite(train_y)
    train_set = [d for d, ok in zip(train_set, finite) if ok]
    train_y = train_y[finite]
    train_x = enc_mod.encode_many(train_set, model.encoder, model.vocab)
    decode = _decode_fn(model)
    oracle = _oracle(model.domain)
    train_best = float(train_y.max())

    history_path = manifest.output_path("history.jsonl")
    rounds_path = manifest.output_path("rounds.csv")
    summary_path = manifest.output_path("summary.json")
    trials_summary = []
    with open(history_path, "w") as hist_fh, \
            open(rounds_path, "w", newline="") as rounds_fh:
        rounds_csv = csv.writer(rounds_fh)
        rounds_csv.writerow(["trial", "round", "mean_score", "best_so_far", "method"])
        for trial in range(cfg["trials"]):
            trial_seed = cfg["seed"] + trial
            n_seed = min(cfg["seed_points"], len(train_set))
            sub = np.random.default_rng([trial_seed, 2]).choice(
                len(train_set), size=n_seed, replace=False)
            bo_config = gpbo.BoConfig(
                iterations=cfg["rounds"], batch_size=cfg["batch_size"],
                pool_size=cfg["pool_size"], xi=cfg["xi"], seed=trial_seed,
                noise_floor=cfg["noise_floor"])
            runs = {
                "bo": gpbo.bo_loop(train_x[sub], train_y[sub], decode, oracle,
                                   bo_config, np.random.default_rng([trial_seed, 0])),
                "random": gpbo.random_search(decode, oracle, bo_config, train_x[sub],
                                             np.random.default_rng([trial_seed, 1])),
            }
            bests = {}
            for method, history in runs.items():
                for rec in history:
                    line = {"trial": trial, "method": method,
                            "round": rec["round"], "index": rec["index"],
                            "z": rec["z"],
                            "dag": dg.to_json_obj(rec["dag"], model.vocab),
                            "score": rec["score"] if rec["valid"] else None,
                            "valid": rec["valid"]}
                    hist_fh.write(json.dumps(line, sort_keys=True,
                                             separators=(",", ":")) + "\n")
                best = -math.inf
                for rnd in range(cfg["rounds"]):
                    round_scores = [r["score"] for r in history
                                    if r["round"] == rnd and r["valid"]]
                    if round_scores:
                        best = max(best, max(round_scores))
                    mean = (repr(float(np.mean(round_scores)))
                            if round_scores else "")
                    best_str = repr(best) if math.isfinite(best) else ""
                    rounds_csv.writerow([trial, rnd, mean, best_str, method])
                bests[method] = best
            trials_summary.append({
                "trial": trial,
                "bo_best": bests["bo"],
                "random_best": bests["random"],
                "bo_beats_random": bests["bo"] > bests["random"],
                "bo_at_least_train_best": bests["bo"] >= train_best,
            })
            print(f"trial {trial}: bo best {bests['bo']:.4f}, "
                  f"random best {bests['random']:.4f}", flush=True)
    summary = {
        "train_best": train_best,
        "trials": trials_summary,
        "bo_wins": sum(t["bo_beats_random"] for t in trials_summary),
        "bo_at_least_train_best": sum(t["bo_at_least_train_best"]
                                      for t in trials_summary),
    }
    _write_json(summary_path, summary)
    manifest.finish()
    print(f"bo beat random in {summary['bo_wins']}/{cfg['trials']} trials; "
          f"matched the best training score in "
          f"{summary['bo_at_least_train_best']}/{cfg['trials']}")
    return 0


# ---------------------------------------------------------------------------
# interpolate / latent-grid


N_CIRCLE_POINTS = 35


def cmd_interpolate(args) -> int:
    cfg = {"checkpoint": args.checkpoint, "index": args.index,
           "seed": args.seed or 0}
    manifest = Manifest(args.out_dir, "interpolate", cfg, cfg["seed"])
    model = _load_model(args.checkpoint)
    dataset, _ = dg.load_dataset(args.data, model.vocab)
    if not 0 <= args.index < len(dataset):
        raise SystemExit(f"--index {args.index} outside dataset of {len(dataset)}")
    start = dataset[args.index]
    z0 = enc_mod.encode(start, model.encoder, model.vocab).mu
    radius = float(np.linalg.norm(z0))
    if radius == 0.0:
        raise SystemExit("start dag embeds at the origin; the circle is degenerate")
    rng = np.random.default_rng(cfg["seed"])
    unit0 = z0 / radius
    v = rng.standard_normal(len(z0))
    v -= (v @ unit0) * unit0
    norm_v = float(np.linalg.norm(v))
    if norm_v < 1e-12:
        raise SystemExit("random direction collapsed onto the start embedding")
    v /= norm_v
    decode = _decode_fn(model)
    out_path = manifest.output_path("circle.jsonl")
    with open(out_path, "w") as fh:
        for k in range(N_CIRCLE_POINTS):
            theta = 2.0 * math.pi * k / N_CIRCLE_POINTS
            z = math.cos(theta) * z0 + math.sin(theta) * radius * v
            d = decode(z, np.random.default_rng([cfg["seed"], k]))
            line = {"theta": theta, "z": z.tolist(),
                    "dag": dg.to_json_obj(d, model.vocab)}
            fh.write(json.dumps(line, sort_keys=True, separators=(",", ":")) + "\n")
    manifest.finish()
    print(f"wrote {N_CIRCLE_POINTS} circle points to {out_path}")
    return 0


def principal_plane(mus: np.ndarray):
    """Top-2 principal directions of the embeddings.

    Returns (mean, components (2, d), explained-variance fractions (2,)).
    """
    mean = mus.mean(axis=0)
    cov = np.cov(mus - mean, rowvar=False)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    top = eigvecs[:, order[:2]].T
    fractions = eigvals[order[:2]] / eigvals.sum()
    return mean, top, fractions


def cmd_latent_grid(args) -> int:
    cfg = {"checkpoint": args.checkpoint, "resolution": args.resolution,
           "seed": args.seed or 0, "extent": 0.3}
    manifest = Manifest(args.out_dir, "latent-grid", cfg, cfg["seed"])
    model = _load_model(args.checkpoint)
    train_set, _ = dg.load_dataset(args.train, model.vocab)
    mus = enc_mod.encode_many(train_set, model.encoder, model.vocab)
    mean, components, fractions = principal_plane(mus)
    decode = _decode_fn(model)
    oracle = _oracle(model.domain)
    res = cfg["resolution"]
    coords = np.linspace(-cfg["extent"], cfg["extent"], res)
    grid_path = manifest.output_path("grid.csv")
    with open(grid_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["u", "v", "score", "valid"])
        for i, u in enumerate(coords):
            for j, v in enumerate(coords):
                z = mean + u * components[0] + v * components[1]
                d = decode(z, np.random.default_rng([cfg["seed"], i, j]))
                score = float(oracle(d))
                writer.writerow([repr(float(u)), repr(float(v)), repr(score),
                                 math.isfinite(score) and dg.is_valid(d, model.vocab)])
    _write_json(manifest.output_path("grid_meta.json"), {
        "explained_variance_fractions": fractions.tolist(),
        "components": components.tolist(),
        "mean": mean.tolist(),
    })
    manifest.finish()
    print(f"wrote {res * res} grid rows to {grid_path}; "
          f"explained variance {fractions[0]:.2f}/{fractions[1]:.2f}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dagspace",
        description="Latent-space generative modeling and optimization for DAGs.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", help="flat JSON config file; flags override")
        p.add_argument("--out-dir", required=True)
        if checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="model checkpoint produced by train")

    p = sub.add_parser("gen-data", help="generate and score a random dataset")
    common(p)
    p.add_argument("--domain", choices=[dg.DOMAIN_NN, dg.DOMAIN_BN])
    p.add_argument("--count", type=int)
    p.add_argument("--test-fraction", type=float, dest="test_fraction")
    p.add_argument("--min-layers", type=int, dest="min_layers")
    p.add_argument("--max-layers", type=int, dest="max_layers")
    p.add_argument("--skip-prob", type=float, dest="skip_prob")
    p.add_argument("--edge-prob", type=float, dest="edge_prob")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the variational autoencoder")
    common(p)
    p.add_argument("--data", required=True, help="training dataset (JSON lines)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=10,
                   dest="checkpoint_every")
    p.add_argument("--domain", choices=[dg.DOMAIN_NN, dg.DOMAIN_BN])
    for flag, typ in (("--alpha", float), ("--lr", float), ("--lr-decay", float),
                      ("--plateau-patience", int), ("--batch-size", int),
                      ("--epochs", int), ("--hidden", int), ("--latent", int),
                      ("--max-nodes", int)):
        p.add_argument(flag, type=typ, dest=flag[2:].replace("-", "_"))
    p.add_argument("--bidirectional", action="store_true", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-basic",
                       help="reconstruction / validity / uniqueness / novelty")
    common(p, checkpoint=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--n-prior", type=int, default=1000, dest="n_prior")
    p.set_defaults(func=cmd_eval_basic)

    p = sub.add_parser("eval-predictive",
                       help="GP regression quality on posterior-mean embeddings")
    common(p, checkpoint=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--repeats", type=int, default=10)
    p.set_defaults(func=cmd_eval_predictive)

    p = sub.add_parser("bo", help="latent-space optimization vs. random search")
    common(p, checkpoint=True)
    p.add_argument("--train", required=True, help="scored training dataset")
    p.add_argument("--trials", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--pool-size", type=int, dest="pool_size")
    p.add_argument("--xi", type=float)
    p.add_argument("--seed-points", type=int, dest="seed_points",
                   help="surrogate seed subsample size (default 500)")
    p.add_argument("--noise-floor", type=float, dest="noise_floor")
    p.set_defaults(func=cmd_bo)

    p = sub.add_parser("interpolate",
                       help="decode 35 points on a latent great circle")
    common(p, checkpoint=True)
    p.add_argument("--data", required=True, help="dataset holding the start dag")
    p.add_argument("--index", type=int, default=0,
                   help="row of the start dag in --data")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("latent-grid",
                       help="score a 2D principal-component slice of the latent space")
    common(p, checkpoint=True)
    p.add_argument("--train", required=True)
    p.add_argument("--resolution", type=int, default=20)
    p.set_defaults(func=cmd_latent_grid)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    os.makedirs(args.out_dir, exist_ok=True)
    with OutputDirLock(args.out_dir):
        return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
