# coding: utf-8

# # Fine-tuning with fake quantization

# Starting from a trained float model, we run one more epoch with fake
# quantization in the forward pass and straight-through gradients in the
# backward pass. The observers that collect ranges during this epoch are then
# reused to build the integer model.

# In[1]:

import numpy as np

from tdnnq import ToyConfig, calibrate, forward_quantized, train_toy
from tdnnq.ptq import quantize_full
from tdnnq.qat import QatSchedule, frame_accuracy, train

cfg = ToyConfig(hidden_dim=32, num_layers=4, train_utts=600, eval_utts=100, epochs=4)
model, _, data = train_toy(cfg)


# In[2]:

stats = calibrate(model, data.calib_x)
ptq = quantize_full(model, stats, 8, "asymmetric", True)
print("post-training:", frame_accuracy(forward_quantized(ptq, data.eval_x), data.eval_y))


# In[3]:

res = train(model, data.train_x, data.train_y, epochs=1, lr=cfg.qat_lr, batch_size=cfg.batch_size,
            seed=cfg.seed, schedule=QatSchedule(), act_mode="asymmetric", quantize_output=True)
qat = quantize_full(res.model, res.qat_state.to_stats(), 8, "asymmetric", True)
print("after fake-quant epoch:", frame_accuracy(forward_quantized(qat, data.eval_x), data.eval_y))


# Fake quantization only starts partway through if we ask for it:

# In[4]:

late = QatSchedule(kind="final_iterations", activate_after_fraction=0.9)
steps = len(data.train_y) // cfg.batch_size
print("first fake-quant step", late.first_active_step(steps), "of", steps)
