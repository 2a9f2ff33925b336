"""Command-line entry point: ``crvae train|eval|probe|embed|ablate``."""

import argparse
import csv
import json
import os
import sys

from .data import load_dataset
from .exceptions import TrainingDivergedError
from .metrics import METRIC_COLUMNS, evaluate, export_latents, read_latents
from .probes import knn_classify, linear_probe
from .runner import TrainConfig, ablate_gamma, final_mi, load_model, metrics_csv, train
from .tsne import tsne_2d


def _cmd_train(args):
    config = TrainConfig.from_file(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.gamma is not None:
        changes["gamma"] = args.gamma
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    config = config.replace(**changes)
    out = args.out or f"run-seed{config.seed}"
    result = train(config, out, resume=args.resume)
    last = dict(zip(METRIC_COLUMNS, result.records[-1]))
    print(json.dumps({"checkpoint": result.checkpoint_path, "metrics": result.metrics_path,
                      "final": last}, sort_keys=True))


def _cmd_eval(args):
    model, config = load_model(args.checkpoint)
    ds = load_dataset(args.dataset, format=args.format, labels_path=args.labels)
    seed = config.seed if config else 0
    record = evaluate(
        model, ds.images, epoch=model.n_epochs_, split="eval", seed=seed,
        rng=[seed, model.n_epochs_], num_samples=args.mi_samples,
        max_mixture=args.mi_mixture, lr=model.current_lr, gamma=model.gamma,
    )
    sys.stdout.write(metrics_csv([record]))


def _split_rows(latents, labels, fraction):
    cut = len(latents) - int(round(len(latents) * fraction))
    if not 0 < cut < len(latents):
        raise ValueError(f"holdout fraction {fraction} leaves an empty split")
    return latents[:cut], labels[:cut], latents[cut:], labels[cut:]


def _cmd_probe(args):
    _, labels, mu = read_latents(args.latents)
    if args.eval_latents:
        _, eval_labels, eval_mu = read_latents(args.eval_latents)
        train_mu, train_labels = mu, labels
    else:
        train_mu, train_labels, eval_mu, eval_labels = _split_rows(mu, labels, args.holdout)
    if args.kind == "linear":
        result = linear_probe(train_mu, train_labels, eval_mu, eval_labels,
                              epochs=args.epochs, lr=args.lr, random_state=args.seed)
    else:
        k = min(args.k, len(train_mu))
        _, result = knn_classify(train_mu, train_labels, eval_mu, k=k, query_labels=eval_labels)
    print(result.to_json())


def _cmd_embed(args):
    model, config = load_model(args.checkpoint)
    if args.dataset:
        ds = load_dataset(args.dataset, format=args.format, labels_path=args.labels)
    elif config is not None and config.dataset:
        ds = load_dataset(config.dataset, format=config.format, labels_path=config.labels or None)
    else:
        raise ValueError("no dataset: pass --dataset")
    export_latents(model, ds.images, ds.labels, args.out)
    summary = {"latents": args.out, "rows": len(ds)}
    if args.tsne:
        _, labels, mu = read_latents(args.out)
        n = min(args.tsne_points, len(mu))
        result = tsne_2d(mu[:n], perplexity=args.perplexity, rng=args.seed)
        stem, _ = os.path.splitext(args.out)
        path = f"{stem}.tsne.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["index", "label", "x", "y"])
            for i in range(n):
                writer.writerow([i, int(labels[i]), *(f"{v:.9g}" for v in result.embedding[i])])
        summary.update(tsne=path, tsne_points=n, kl_initial=result.kl_initial,
                       kl_final=result.kl_final)
    print(json.dumps(summary, sort_keys=True))


def _cmd_ablate(args):
    config = TrainConfig.from_file(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    gammas = tuple(float(g) for g in args.gammas.split(","))
    out = args.out or f"ablate-seed{config.seed}"
    results = ablate_gamma(config, gammas, out)
    print(json.dumps({"ablation": os.path.join(out, "ablation.csv"),
                      "final_mi_nats": {f"{g:g}": final_mi(r) for g, r in results.items()}},
                     sort_keys=True))


def build_parser():
    parser = argparse.ArgumentParser(prog="crvae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="run directory (default run-seed<N>)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="collapse metrics of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", default="idx", choices=["idx", "cifar10-bin"])
    p.add_argument("--labels")
    p.add_argument("--mi-samples", type=int, default=4096)
    p.add_argument("--mi-mixture", type=int, default=2048)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("probe", help="linear or KNN probe on a latent CSV")
    p.add_argument("--latents", required=True)
    p.add_argument("--kind", required=True, choices=["linear", "knn"])
    p.add_argument("--eval-latents", help="separate evaluation CSV (default: last rows)")
    p.add_argument("--holdout", type=float, default=0.1)
    p.add_argument("--k", type=int, default=200)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("embed", help="export posterior means, optionally with t-SNE")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", help="default: the dataset named in the checkpoint")
    p.add_argument("--format", default="idx", choices=["idx", "cifar10-bin"])
    p.add_argument("--labels")
    p.add_argument("--tsne", action="store_true")
    p.add_argument("--tsne-points", type=int, default=1000)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("ablate", help="sweep gamma at a fixed seed")
    p.add_argument("--config", required=True)
    p.add_argument("--gammas", default="0,0.2,0.4,0.6,0.8,1.0")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except TrainingDivergedError as exc:
        print(f"crvae: training diverged: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"crvae: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
