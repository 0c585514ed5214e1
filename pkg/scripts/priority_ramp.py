"""Per-priority median TTFT once all four clients of the staggered ramp are active."""

from _common import parser, show, write_rows

from multislo.experiments import POLICIES, priority_ramp


def main() -> None:
    p = parser(__doc__, "results/priority_ramp.csv")
    p.add_argument("--seeds", default="0,1,2")
    args = p.parse_args()
    rows = [priority_ramp(int(s), policy) for s in args.seeds.split(",") for policy in POLICIES]
    write_rows(args.out, rows)
    show(rows)


if __name__ == "__main__":
    main()
