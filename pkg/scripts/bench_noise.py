"""Time the SNR degradation of a 128x128x32 volume at each ladder level."""
import argparse
import time

import numpy as np

from cardioplan.noise import SnrRois, SnrSpec, degrade_to_snr, measure_snr
from cardioplan.volume import BoxRoi, Volume, VolumeMeta


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--coils", type=int, default=4)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    arr = np.abs(rng.normal(0.0, 4.0, size=(32, 128, 128)))
    signal = BoxRoi((40, 40, 4), (88, 88, 28))
    arr[signal.slices] += 500.0
    v = Volume.from_array(arr, (2.0, 2.0, 5.0), VolumeMeta("bench", args.coils))
    rois = SnrRois(signal, BoxRoi((0, 0, 0), (16, 16, 32)))
    print(f"starting SNR {measure_snr(v, rois):.1f}, {args.coils} coils")
    for target in SnrSpec().targets:
        times = []
        for r in range(args.repeats):
            t0 = time.perf_counter()
            out = degrade_to_snr(v, target, rois, SnrSpec(seed=r))
            times.append(time.perf_counter() - t0)
        print(f"target {target:5.1f}  measured {out.meta.snr_tag:7.3f}  best {min(times):.3f}s  "
              f"worst {max(times):.3f}s")


if __name__ == "__main__":
    main()
