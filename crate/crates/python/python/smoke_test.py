"""Smoke test for the fsyncchan_py extension.

Build the module and put it next to this script first:

    cargo build --release -p fsyncchan-py --features extension-module
    cp target/release/libfsyncchan_py.so crates/python/python/fsyncchan_py.so
"""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import fsyncchan_py as fc


def main():
    bw, c = fc.capacity(50, 0.0)
    assert (bw, c) == (20000.0, 20000.0), (bw, c)
    assert fc.capacity(50, 0.5)[1] == 0.0
    assert abs(fc.binary_entropy(0.5) - 1.0) < 1e-12

    cfg = fc.ChannelConfig(ts_us=200, payload_bits=256)
    payload = fc.prbs(11, 256)
    frame = fc.encode_frames(payload, cfg)
    assert len(frame) == cfg.frame_bits

    quiet = fc.sim_quiet_trace(10, cfg, seed=3)
    mean, std, theta = fc.calibrate(quiet, cfg)
    assert mean < theta, (mean, std, theta)

    trace = fc.sim_transmit(frame, cfg, seed=3)
    bits = fc.decode(trace, cfg, quiet=quiet, n_bits=len(frame))
    e10, e01, p = fc.compare_bits(frame, bits)
    assert p == 0.0, (e10, e01, p)
    assert fc.extract_payloads(bits, cfg) == [payload]

    roundtrip = fc.Trace.from_csv(trace.to_csv())
    assert roundtrip.samples() == trace.samples()

    csv = fc.bench([50, 200], 4000, seed=1)
    assert csv.splitlines()[0].startswith("t_s_us,n_bits"), csv

    eps = fc.episodes(fc.Trace([(0, 20000), (25000, 900000), (930000, 20000)]))
    assert eps == [(25000, 925000, 900000, 1)], eps

    report = fc.classify_operations(fc.synth_operations(20, seed=2))
    accuracy = float(report.splitlines()[-1].split(",")[1])
    assert accuracy > 0.5, report

    print("smoke test passed: BER 0 at 200us, theta %.0f ns, k-NN accuracy %.3f" % (theta, accuracy))


if __name__ == "__main__":
    main()
