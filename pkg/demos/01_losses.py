"""Walk through the distillation loss terms on a handful of logits."""
import numpy as np

from dkel import DistillSchedule, Tensor, dkel_total, kd_loss, pcl_total, teacher_ensemble

rng = np.random.default_rng(0)

# one batch of 4 samples, 3 classes, 3 peers
peers = [rng.standard_normal((4, 3)) for _ in range(3)]
ensemble = sum(peers) / 3
teachers = [p + 0.3 * rng.standard_normal((4, 3)) for p in peers]
labels = np.array([0, 2, 1, 1])

# a distribution distilled into itself costs nothing
print("kd(x, x)      =", kd_loss(peers[0], peers[0], 3.0).item())
print("kd(s, t)      =", kd_loss(peers[0], teachers[1], 3.0).item())

# the ensemble-knowledge target for peer 0 is the mean of teachers 1 and 2
print("teacher mean  =", teacher_ensemble(teachers, 0).data[0])

# the decay weight hands control from ensemble knowledge to decoupled knowledge
sched = DistillSchedule("exponential", gamma=0.5, epoch_max=100)
for e in (0, 2, 10, 40):
    br = dkel_total(peers, ensemble, teachers, labels, sched, e, 3.0)
    print(f"epoch {e:>2}: omega={br.omega:.4f}  total={br.total.item():.4f}")

print("pcl total     =", pcl_total(peers, ensemble, teachers, labels, 3.0).total.item())

# gradients reach the student logits only; teacher logits are constants
s = Tensor(peers[0], requires_grad=True)
t = Tensor(teachers[1], requires_grad=True)
kd_loss(s, t, 3.0).backward()
print("student grad row 0:", s.grad[0], " teacher grad:", t.grad)
