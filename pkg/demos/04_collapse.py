"""Weight decay alone shrinks every weight by 1 - lr * wd per step; the monitor notices."""
import numpy as np

from dkel import NetworkConfig, collapse_monitor
from dkel.network import MultiPeerNetwork
from dkel.trainer import TrainConfig, first_collapse, gen_dataset, run_training, weight_decay_only_run

data = gen_dataset("spirals", 300, 3, 0.1, 0)

# zero loss gradient, lr 0.1, wd 5e-4, no momentum
net = MultiPeerNetwork(NetworkConfig(init_scale=0.01), seed=0)
probes, traj = weight_decay_only_run(net, data.x_val, 1000, 0.1, 5e-4, keep_trajectory=True)
nz = traj[0] != 0
print("per-step ratio:", np.unique(np.round(traj[1][nz] / traj[0][nz], 15)))
print("norm after 1000 steps / start:", probes[-1].norm_student / probes[0].norm_student, "vs", 0.99995 ** 1000)
print("monitor:", collapse_monitor(probes))

# a coupled (PCL) run with tiny logits and heavy decay drifts into the collapsed state
coupled = run_training(TrainConfig(method="pcl", weight_decay=0.5, epochs=60, seed=1), data,
                       NetworkConfig(init_scale=0.01))
print("coupled arm first flagged at epoch:", first_collapse(coupled.history))

healthy = run_training(TrainConfig(method="dkel", epochs=60, seed=1), data)
print("dkel arm first flagged at epoch:", first_collapse(healthy.history))
