"""Command-line applications: sports ranking, simulation study, generic fits."""
