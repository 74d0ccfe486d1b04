"""Deep spiking Q-networks: LIF/LI simulation, surrogate-gradient BPTT, DQN training and FGSM evaluation."""

__version__ = "0.1.0"
