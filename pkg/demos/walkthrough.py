"""Small end-to-end run on the 33-bus feeder with the mid-point PMU plan.

Builds a few hundred samples, trains SF and PS, fine-tunes IL through the
WLS layer and prints test RMSEs against the generator ground truth.  Takes
about ten seconds on one core; the CLI ``repro`` command does the full loop.

    python demos/walkthrough.py
"""

import numpy as np

from implicit_dsse.evaluation import rmse_report
from implicit_dsse.grid import parse_case
from implicit_dsse.measurements import make_plan
from implicit_dsse.neural import TrainingConfig
from implicit_dsse.pipelines import build_dataset, estimate_batch, train_il, train_ps, train_sf


def main():
    net = parse_case("ieee33")
    plan = make_plan("PMU", net)
    print(f"{net.name}: {net.n_bus} buses, state size {net.n_state}; "
          f"{plan.m_a} real-time channels, {plan.m_d} delayed")

    ds = build_dataset(net, plan, 0.10, counts=(400, 100, 100), seed=0)
    cfg = TrainingConfig(max_epochs=300, batch_size=100, learning_rate=1e-3)

    sf = train_sf(ds, cfg)
    ps = train_ps(ds, cfg)
    print(f"pseudo-measurement sigma: median {np.median(ps.sigma_d.sigma_d):.4f} p.u.")
    il = train_il(ds, TrainingConfig(max_epochs=30, batch_size=100, learning_rate=1e-4, gamma=0.5),
                  ps, ps.sigma_d, net, plan)
    print(f"IL stopped after {il.history['epochs']} epochs (best {il.history['best_epoch']})")

    te = ds.test
    for model in (sf, ps, il):
        est = estimate_batch(model.method, model, ds.z_a[te], plan, net)
        rep = rmse_report(est.x, ds.x_true[te], net)
        print(f"{model.method}: RMSE_V {rep.rmse_v:.3e}  RMSE_theta {np.rad2deg(rep.rmse_theta):.3e} deg  "
              f"RMSE_P {rep.rmse_p:.3e}")


if __name__ == "__main__":
    main()
