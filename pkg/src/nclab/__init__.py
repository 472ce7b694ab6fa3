"""nclab: a desk-scale laboratory for matrix stochastic control problems
driven by common and GUE noise, with the free-probability diagnostics
(laws, freeness statistics, Laplacians, exponential-functional formulas)
needed to watch the finite-n value functions approach their large-n limit
for convex costs."""

__version__ = "0.1.0"
