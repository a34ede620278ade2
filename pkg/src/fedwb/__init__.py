"""fedwb: federated-learning simulations with Wasserstein-barycenter model fusion.

Subpackages/modules:

- `ot`: discrete 1D optimal transport (distances, plans, barycenters, LP oracles)
- `nn`: minimal dense network (forward/backprop/SGD, losses, serialization)
- `fusion`: per-layer weight normalization + barycenter fusion, FedAvg baseline
- `mnist_data`: IDX parsing and stratified federated splits
- `federated`: the distributed-MNIST training loop and its metrics
- `rl`: CartPole dynamics, DQN agents, heterogeneous federated RL loop
- `cli`: the `fedwb` command-line entry point
"""

__version__ = "0.1.0"
