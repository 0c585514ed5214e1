"""Time-to-ready of one forced scale-out for every model and loading mode, read from the event log."""

from _common import parser, show, write_rows

from multislo.experiments import provisioning_table


def main() -> None:
    args = parser(__doc__, "results/provisioning.csv").parse_args()
    rows = provisioning_table()
    write_rows(args.out, rows)
    show(rows)
    by = {(r["model"], r["mode"]): r["measured_s"] for r in rows}
    for model in ("7B", "32B", "70B"):
        print(f"{model}: disk/fast {by[(model, 'disk')] / by[(model, 'fast')]:.2f}x")


if __name__ == "__main__":
    main()
