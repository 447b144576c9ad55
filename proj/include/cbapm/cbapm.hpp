#pragma once

#include "cbapm/calendar.hpp"
#include "cbapm/csv.hpp"
#include "cbapm/dataset.hpp"
#include "cbapm/diagnostics.hpp"
#include "cbapm/encoder.hpp"
#include "cbapm/experiment.hpp"
#include "cbapm/experiment_config.hpp"
#include "cbapm/macro.hpp"
#include "cbapm/manifest.hpp"
#include "cbapm/mlp.hpp"
#include "cbapm/model.hpp"
#include "cbapm/nn.hpp"
#include "cbapm/optim.hpp"
#include "cbapm/panel.hpp"
#include "cbapm/portfolio.hpp"
#include "cbapm/rng.hpp"
#include "cbapm/serialize.hpp"
#include "cbapm/stats.hpp"
#include "cbapm/synth.hpp"
#include "cbapm/version.hpp"
#include "cbapm/windows.hpp"
