#pragma once

#include "mfbdsde/error.hpp"
#include "mfbdsde/parallel.hpp"
#include "mfbdsde/rng.hpp"
#include "mfbdsde/paths.hpp"
#include "mfbdsde/measures.hpp"
#include "mfbdsde/coefficients.hpp"
#include "mfbdsde/scenarios.hpp"
#include "mfbdsde/forward.hpp"
#include "mfbdsde/regression.hpp"
#include "mfbdsde/linear_bdsde.hpp"
#include "mfbdsde/backward.hpp"
#include "mfbdsde/verify.hpp"
#include "mfbdsde/report.hpp"
#include "mfbdsde/cli.hpp"
