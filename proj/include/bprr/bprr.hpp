#pragma once

#include "bprr/errors.hpp"
#include "bprr/linalg.hpp"
#include "bprr/distributions.hpp"
#include "bprr/evidence.hpp"
#include "bprr/sampler.hpp"
#include "bprr/diagnostics.hpp"
#include "bprr/baselines.hpp"
#include "bprr/io.hpp"
#include "bprr/config.hpp"
