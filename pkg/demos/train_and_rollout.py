"""Train a narrow model on a few tiny scenes, then roll it out on an unseen one."""

from cconvfluid.core import FrameSequence, SimConfig
from cconvfluid.metrics import compare_sequences
from cconvfluid.network import Model, ModelConfig
from cconvfluid.refsim import generate, initial_state, preset, scene_config
from cconvfluid.simulator import escaped, rollout
from cconvfluid.training import TrainConfig, smoothed, train

sim = SimConfig()
data = [generate(preset("drop-tiny", s, frame_count=30), sim) for s in range(4)]
mcfg = ModelConfig(width=8, selector_width=4)
tcfg = TrainConfig.desk(total_iters=60, batch_size=2, log_every=1, halving_steps=(30,))
res = train(data, sim, mcfg, tcfg)
loss = [r[1] for r in res.rows]
print(f"loss {loss[0]:.2f} at start, {smoothed(loss, 10)[-1]:.2f} smoothed at the end")

p = preset("drop-tiny", 99, frame_count=21)
gt = generate(p, sim)
pred = rollout(initial_state(p, sim), Model(mcfg, res.params), scene_config(p, sim), 20)
truth = FrameSequence(gt.fluid_pos[1:], gt.fluid_vel[1:], gt.solid_pos, gt.solid_normal, gt.dt)
rep = compare_sequences(pred, truth, sim)
print(f"20-frame rollout: sequence distance {rep.seq_distance_dn:.2f} mm, "
      f"W1 {rep.wasserstein:.2f} mm, density error {rep.max_density_error:.3f}")
print(f"particles outside the box at the last frame: {escaped(pred.fluid_pos[-1], p.box_lo, p.box_hi).mean():.1%}")
