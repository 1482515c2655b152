#pragma once

#include "icl_lab/baselines.hpp"
#include "icl_lab/config.hpp"
#include "icl_lab/data.hpp"
#include "icl_lab/errors.hpp"
#include "icl_lab/eval.hpp"
#include "icl_lab/nn.hpp"
#include "icl_lab/ops.hpp"
#include "icl_lab/prompt.hpp"
#include "icl_lab/rng.hpp"
#include "icl_lab/tasks.hpp"
#include "icl_lab/tensor.hpp"
#include "icl_lab/train.hpp"
