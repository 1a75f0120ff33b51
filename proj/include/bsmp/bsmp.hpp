#pragma once

#include "bsmp/config.hpp"
#include "bsmp/core.hpp"
#include "bsmp/cost.hpp"
#include "bsmp/costate_field.hpp"
#include "bsmp/feynman_kac.hpp"
#include "bsmp/kernel.hpp"
#include "bsmp/meanfield.hpp"
#include "bsmp/parallel.hpp"
#include "bsmp/problem.hpp"
#include "bsmp/rng.hpp"
#include "bsmp/sde.hpp"
#include "bsmp/smp.hpp"
#include "bsmp/three_step.hpp"
