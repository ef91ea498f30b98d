"""How decode time and accuracy move with the training subsample rate.

Uses band-power features so the run takes about a minute; the decode cost
grows with the number of sampled training vertices.

    python demos/eta_timing.py
"""

from eegfusenet.data import SynthSpec, synth_segments
from eegfusenet.evaluation import ExperimentConfig, sweep
from eegfusenet.hypergraph import DecodeConfig


def main():
    data = synth_segments(SynthSpec(subjects=32, trials=4, segments_per_trial=20))
    cfg = ExperimentConfig(features="psd", decode=DecodeConfig(latent=64))
    result = sweep(data, {"eta": [1, 2, 3, 4, 5, 10, 15]}, cfg, timing_repeats=3)
    print(f"{'eta':>5} {'decode s':>9} {'P_acc':>7}")
    for row, rep in zip(result.timing_table(), result.reports):
        print(f"{row['eta']:>5g} {row['decode_s']:>9.3f} {rep.mean('p_acc'):>7.2f}")


if __name__ == "__main__":
    main()
