"""Attainment vs QPS for the SLO-aware and round-robin policies on one collocated pool."""

from _common import parser, show, write_rows

from multislo.experiments import COLLOCATED_TREND, mean_by, pre_collapse_qps, trend


def main() -> None:
    p = parser(__doc__, "results/collocated_trend.csv")
    p.add_argument("--workers", type=int, default=COLLOCATED_TREND.workers)
    args = p.parse_args()
    COLLOCATED_TREND.workers = args.workers
    rows = trend(COLLOCATED_TREND)
    write_rows(args.out, rows)
    means = mean_by(rows)
    show([{"qps": q, "policy": pol, "attainment": a} for (q, pol), a in means.items()])
    knee = pre_collapse_qps(means)
    if knee is not None:
        print(f"highest qps with SLO-aware attainment >= 0.5: {knee}, "
              f"ratio {means[(knee, 'slo_aware')] / means[(knee, 'round_robin')]:.2f}x")


if __name__ == "__main__":
    main()
