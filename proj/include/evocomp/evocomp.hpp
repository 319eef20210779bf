#pragma once

#include "evocomp/compressor.hpp"
#include "evocomp/core.hpp"
#include "evocomp/error.hpp"
#include "evocomp/evolution.hpp"
#include "evocomp/grouping.hpp"
#include "evocomp/io.hpp"
#include "evocomp/labeling.hpp"
#include "evocomp/losses.hpp"
#include "evocomp/metrics.hpp"
#include "evocomp/random.hpp"
#include "evocomp/remote.hpp"
#include "evocomp/scorer.hpp"
#include "evocomp/synth.hpp"
#include "evocomp/training.hpp"
