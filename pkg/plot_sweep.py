# plot_sweep.py
# Plot a sweep summary CSV: median MSE against sparsity, one line per
# (system, sequence length), next to the interpolation baseline.

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402


def load_summary(path):
    """Aggregate rows only, sorted for plotting"""
    df = pd.read_csv(path)
    if "row_kind" in df.columns:
        df = df[df["row_kind"] == "aggregate"]
    return df.sort_values(["system", "length", "noise", "sparsity"])


def plot_summary(df, out, noise=None):
    if noise is not None:
        df = df[df["noise"] == noise]
    if df.empty:
        print("Nothing to plot.")
        return None

    fig, ax = plt.subplots(figsize=(10, 6))
    for (system, length), part in df.groupby(["system", "length"]):
        ax.plot(part["sparsity"], part["mse_median"], marker="o", linestyle="-", label=f"{system} L={length}")
        ax.plot(part["sparsity"], part["baseline_mse"], linestyle="--", linewidth=0.8, color="gray")

    ax.set_yscale("log")
    ax.set_title("Reconstruction error vs sparsity (dashed: linear interpolation)")
    ax.set_xlabel("Sparsity S_r")
    ax.set_ylabel("Median MSE")
    ax.grid(True)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(f"Saved {out}")
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(description="Plot a chronoweft sweep summary")
    parser.add_argument("summary", help="sweep_summary.csv or sweep.csv")
    parser.add_argument("--out", default="sweep.png")
    parser.add_argument("--noise", type=float, default=None, help="Only this noise level")
    args = parser.parse_args(argv)
    plot_summary(load_summary(args.summary), args.out, args.noise)


if __name__ == "__main__":
    main()
