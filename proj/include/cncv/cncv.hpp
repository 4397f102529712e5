#pragma once

#include "cncv/ad/param_store.hpp"
#include "cncv/ad/tape.hpp"
#include "cncv/ad/tensor_tape.hpp"
#include "cncv/backends.hpp"
#include "cncv/config.hpp"
#include "cncv/errors.hpp"
#include "cncv/evaluation.hpp"
#include "cncv/io.hpp"
#include "cncv/model.hpp"
#include "cncv/parallel.hpp"
#include "cncv/problems.hpp"
#include "cncv/rng.hpp"
#include "cncv/samplers.hpp"
#include "cncv/training.hpp"
