#pragma once

#include "permtail/epsilon.hpp"
#include "permtail/errors.hpp"
#include "permtail/estimators.hpp"
#include "permtail/gof.hpp"
#include "permtail/gpd.hpp"
#include "permtail/io.hpp"
#include "permtail/pipeline.hpp"
#include "permtail/rng.hpp"
#include "permtail/simharness.hpp"
#include "permtail/threshold.hpp"
