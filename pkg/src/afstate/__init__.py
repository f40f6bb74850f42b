"""Action-free state-policy pretraining and guided online learning.

Submodules:
  nn           minimal MLP + Adam with manual backprop
  envs, data   toy control environments and offline dataset tooling
  discretiser  state-difference code alphabet
  critic       decomposed Q over code space
  pretrain     offline trainers (conservative decomposed Q and BC baselines)
  online       TD3 / discrete decomposed-Q agents, IDM, beta-switched training
  metrics      rollout evaluation and table aggregation
  bound        finite-MDP check of the discretisation value bound
  cli          command-line front end
"""

__version__ = "0.1.0"
