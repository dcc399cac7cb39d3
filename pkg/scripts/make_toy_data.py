"""Generate the procedural toy corpus used by the experiment scripts.

Writes three still-image pools (HDR scenes, well-exposed LDRs, badly exposed
LDRs) and a couple of drifting HDR clips. Everything is seeded, so reruns
reproduce the same bytes.
"""

import argparse
from pathlib import Path

from hdrtm.toy import make_toy_hdr_videos, make_toy_pools


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="corpus root directory")
    ap.add_argument("--count", type=int, default=20, help="images per pool")
    ap.add_argument("--videos", type=int, default=2)
    ap.add_argument("--frames", type=int, default=6, help="frames per video")
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=100)
    args = ap.parse_args()

    root = Path(args.out)
    pools = make_toy_pools(root / "pools", n_hdr=args.count,
                           n_good=args.count, n_poor=args.count,
                           size=args.size, seed=args.seed)
    clips = make_toy_hdr_videos(root / "videos", count=args.videos,
                                frames=args.frames, size=args.size,
                                seed=args.seed)
    for kind, path in pools.items():
        print(f"{kind}: {path}")
    print(f"videos: {len(clips)} clips under {root / 'videos'}")


if __name__ == "__main__":
    main()
