#pragma once

#include "mustgan/checkpoint.hpp"
#include "mustgan/config.hpp"
#include "mustgan/evaluate.hpp"
#include "mustgan/losses.hpp"
#include "mustgan/metrics.hpp"
#include "mustgan/model.hpp"
#include "mustgan/mtns.hpp"
#include "mustgan/nn.hpp"
#include "mustgan/ops.hpp"
#include "mustgan/optim.hpp"
#include "mustgan/phantom.hpp"
#include "mustgan/sweep.hpp"
#include "mustgan/tensor.hpp"
#include "mustgan/train.hpp"
