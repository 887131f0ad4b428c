#pragma once

#include "blpmle/core.hpp"
#include "blpmle/quadrature.hpp"
#include "blpmle/shares.hpp"
#include "blpmle/inversion.hpp"
#include "blpmle/jacobian.hpp"
#include "blpmle/rng.hpp"
#include "blpmle/equilibrium.hpp"
#include "blpmle/optimize.hpp"
#include "blpmle/likelihood.hpp"
#include "blpmle/gmm.hpp"
#include "blpmle/montecarlo.hpp"
#include "blpmle/io.hpp"
