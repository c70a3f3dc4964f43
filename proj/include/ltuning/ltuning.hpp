#pragma once

// Umbrella header for the L-Tuning library.

#include "ltuning/adapters.hpp"
#include "ltuning/backbone.hpp"
#include "ltuning/compare.hpp"
#include "ltuning/crc32.hpp"
#include "ltuning/data.hpp"
#include "ltuning/errors.hpp"
#include "ltuning/evaluation.hpp"
#include "ltuning/gradcheck.hpp"
#include "ltuning/optim.hpp"
#include "ltuning/rng.hpp"
#include "ltuning/tensor.hpp"
#include "ltuning/tokenizer.hpp"
#include "ltuning/training.hpp"
#include "ltuning/weights_io.hpp"
