"""Static minimum, static maximum and autoscaled pools on a bursty trace with idle gaps."""

from _common import parser, show, write_rows

from multislo.experiments import scaling_benefit


def main() -> None:
    p = parser(__doc__, "results/scaling_benefit.csv")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--min-workers", type=int, default=2)
    p.add_argument("--max-workers", type=int, default=4)
    args = p.parse_args()
    rows = [scaling_benefit(int(s), args.min_workers, args.max_workers) for s in args.seeds.split(",")]
    write_rows(args.out, rows)
    show(rows)


if __name__ == "__main__":
    main()
