#pragma once

#include "normatch/errors.hpp"
#include "normatch/diffcore.hpp"
#include "normatch/nn.hpp"
#include "normatch/flow.hpp"
#include "normatch/data.hpp"
#include "normatch/objective.hpp"
#include "normatch/harness/config.hpp"
#include "normatch/harness/metrics.hpp"
#include "normatch/harness/run.hpp"
#include "normatch/harness/checkpoint.hpp"
#include "normatch/harness/experiment.hpp"
