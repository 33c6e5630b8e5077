"""Script generation, simulation, episodes and training."""
