"""Attainment vs QPS with separate prefill and decode pools, plus one-shot dispatch counts."""

from _common import parser, show, write_rows

from multislo.experiments import PD_TREND, mean_by, trend


def main() -> None:
    p = parser(__doc__, "results/pd_trend.csv")
    p.add_argument("--model", default=PD_TREND.model)
    p.add_argument("--prefill-workers", type=int, default=PD_TREND.prefill_workers)
    p.add_argument("--decode-workers", type=int, default=PD_TREND.decode_workers)
    args = p.parse_args()
    PD_TREND.model = args.model
    PD_TREND.prefill_workers, PD_TREND.decode_workers = args.prefill_workers, args.decode_workers
    rows = trend(PD_TREND)
    write_rows(args.out, rows)
    show([{"qps": q, "policy": pol, "attainment": a} for (q, pol), a in mean_by(rows).items()])
    print(f"requests decode-assigned before prefill finished: {sum(r['one_shot'] for r in rows)}")


if __name__ == "__main__":
    main()
