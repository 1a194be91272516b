# read_ledger.py
# Print the latest runs (and optionally one run's trials) from the ledger

import argparse

from chronoweft import ledger, settings


def main(argv=None):
    parser = argparse.ArgumentParser(description="Show recent chronoweft runs")
    parser.add_argument("--db", default=str(settings.LEDGER_FILE), help="SQLite ledger file")
    parser.add_argument("--limit", type=int, default=20, help="Number of runs to show")
    parser.add_argument("--trials", type=int, default=None, help="Also list the trials of this run id")
    args = parser.parse_args(argv)

    runs = ledger.read_runs(db=args.db, limit=args.limit)
    if runs.empty:
        print(f"No runs recorded in {args.db}")
        return 0

    # Newest first
    for row in runs[["id", "created_at", "verb", "config_hash", "seed", "status", "output"]].itertuples(index=False):
        print(tuple(row))

    if args.trials is not None:
        trials = ledger.read_trials(args.trials, db=args.db)
        print(f"\nTrials for run {args.trials}:")
        print(trials[["trial", "seed", "objective", "failed", "seconds"]].to_string(index=False))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
