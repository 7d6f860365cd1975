"""Geography-keyed hierarchical Chord overlay: keys, clustering, routing,
swarm optimisation and a deterministic network simulator."""

__version__ = "0.1.0"
