#pragma once

#include "actcab/data.hpp"
#include "actcab/decoder.hpp"
#include "actcab/errors.hpp"
#include "actcab/lm.hpp"
#include "actcab/metrics.hpp"
#include "actcab/pipeline.hpp"
#include "actcab/probe.hpp"
#include "actcab/trainer.hpp"
#include "actcab/world.hpp"
