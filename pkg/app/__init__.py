"""
spectragraph: joint B-spline smoothing and graph learning for bundles of curves.

Main Components:
    - bspline: basis evaluation and design matrices
    - graph: undirected graphs, graph priors and structural distances
    - gwishart: G-Wishart sampling and normalizing constants
    - bdmcmc: birth-death moves over graphs
    - gibbs_sampler: conditional updates and the chain driver
    - posterior: weighted summaries and graph selection
    - simulation: synthetic experiments and replicate campaigns
    - main: command line (fit, simulate, select)
"""

__version__ = "0.1.0"
