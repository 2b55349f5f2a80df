#pragma once

#include "mels/cli.hpp"
#include "mels/dataset.hpp"
#include "mels/diagnostics.hpp"
#include "mels/error.hpp"
#include "mels/io.hpp"
#include "mels/likelihood.hpp"
#include "mels/postestimation.hpp"
#include "mels/random.hpp"
#include "mels/sampler.hpp"
#include "mels/simulator.hpp"
