#!/usr/bin/env python3
"""Write a deterministic synthetic byte corpus for the byte-LM drills."""

import argparse

from rodimus.data import synthetic_text


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="corpus.txt")
    ap.add_argument("--bytes", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    data = synthetic_text(args.bytes, args.seed)
    with open(args.out, "wb") as f:
        f.write(data)
    print(f"wrote {len(data)} bytes to {args.out}")


if __name__ == "__main__":
    main()
