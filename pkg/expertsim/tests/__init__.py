# Tests for the expertsim app
