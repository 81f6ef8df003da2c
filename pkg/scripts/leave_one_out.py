"""Leave-one-out generalization to an unseen solver.

Protocol: pick the held-out solver (by default the second best on the
training table), train the pair-scoring system on the remaining zoo,
then reintegrate the held-out solver from its performance columns alone
(no retraining) and compare top-k gaps on the test split.

Usage:
    python3 scripts/leave_one_out.py --kind TSP --seeds 0 1 2 \
        --train 600 --test 200 --epochs 6
"""

import argparse
import copy

import numpy as np

import psel.model as mdl
import psel.pipeline as pl
import psel.solver_embed as se
import psel.strategies as stg


def topk_gap(scores_by_id, table, dataset, k):
    gaps = table.gaps()
    idx = table.row_index()
    vals = []
    for it in dataset:
        d = stg.select_topk(scores_by_id[it.id], min(k, gaps.shape[1]), it.id)
        vals.append(gaps[idx[it.id], d.chosen].min())
    return float(np.mean(vals))


def run_seed(args, seed):
    cfg = pl.ExperimentConfig(
        kind=args.kind, train_count=args.train, val_count=args.val,
        test_count=args.test, seeds=[seed], epochs=args.epochs,
        embed_dim=args.dim, heads=4, ff_hidden=2 * args.dim,
        out_dir=f"{args.out}/seed{seed}_src", jobs=args.jobs)
    splits = pl.stage_datasets(cfg, seed)
    handles = cfg.zoo_handles()
    tables = pl.stage_tables(cfg, seed, splits, handles)
    fit_table = pl.concat_tables(tables["train"], tables["val"])

    # hold out the second-best solver by mean training gap
    order = np.argsort(tables["train"].gaps().mean(axis=0))
    held = tables["train"].solver_ids[order[1]]
    rest = [s for s in tables["train"].solver_ids if s != held]

    tcfg = mdl.TrainConfig(lr=cfg.lr, epochs=cfg.epochs,
                           batch_size=cfg.batch_size, seed=seed,
                           loss="ranking")
    system = se.init_embedding_system(cfg.kind, cfg.encoder_cfg(), seed=seed,
                                      head_hidden=cfg.head_hidden)
    trained, _ = se.train_embedding_system(
        system, splits["train"], fit_table.subset_columns(rest), tcfg,
        val_set=splits["val"])

    by_id = {it.id: it for it in splits["train"] + splits["val"]}
    with_held = se.integrate_unseen_solver(
        trained, held, fit_table.subset_columns(rest + [held]), by_id)

    test_table = tables["test"]
    scores_without = {it.id: se.embedding_scores(trained, it)
                      for it in splits["test"]}
    scores_with = {it.id: se.embedding_scores(with_held, it)
                   for it in splits["test"]}
    row = {"seed": seed, "held": held}
    for k in (1, 2):
        row[f"top{k}_without"] = topk_gap(
            scores_without, test_table.subset_columns(rest),
            splits["test"], k)
        row[f"top{k}_with"] = topk_gap(
            scores_with, test_table.subset_columns(with_held.solver_order),
            splits["test"], k)
    return row


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kind", default="TSP", choices=["TSP", "CVRP"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--train", type=int, default=600)
    ap.add_argument("--val", type=int, default=100)
    ap.add_argument("--test", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs/loo")
    args = ap.parse_args()

    rows = [run_seed(args, s) for s in args.seeds]
    print(f"\n{'seed':>4s} {'held out':>22s} {'top1 w/o':>9s} {'top1 w/':>9s} "
          f"{'top2 w/o':>9s} {'top2 w/':>9s}")
    for r in rows:
        print(f"{r['seed']:>4d} {r['held']:>22s} {r['top1_without']:9.4f} "
              f"{r['top1_with']:9.4f} {r['top2_without']:9.4f} "
              f"{r['top2_with']:9.4f}")
    t2_with = np.mean([r["top2_with"] for r in rows])
    t2_without = np.mean([r["top2_without"] for r in rows])
    t1_delta = np.mean([r["top1_with"] - r["top1_without"] for r in rows])
    print(f"\nmean top-2 with reintroduced solver {t2_with:.4f}% vs "
          f"without {t2_without:.4f}%  (top-1 delta {t1_delta:+.4f}pp)")


if __name__ == "__main__":
    main()
