#pragma once

// Dense arrays with reverse-mode automatic differentiation and the operator
// set used by the models and losses.

#include "mirau/nd/core.hpp"
#include "mirau/nd/gemm.hpp"
#include "mirau/nd/grad_check.hpp"
#include "mirau/nd/nn.hpp"
#include "mirau/nd/ops.hpp"
#include "mirau/nd/params.hpp"
