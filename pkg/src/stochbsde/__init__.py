"""Monte Carlo solver for multidimensional BSDEs with stochastic-monotone drivers.

Also ships empirical checks of the stochastic Gronwall and Bihari inequalities
and of the solution's a priori estimates.
"""

__version__ = "0.1.0"
