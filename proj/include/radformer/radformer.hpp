#pragma once

#include "radformer/checkpoint.hpp"
#include "radformer/conv.hpp"
#include "radformer/data.hpp"
#include "radformer/explainer.hpp"
#include "radformer/fusion.hpp"
#include "radformer/global_branch.hpp"
#include "radformer/gradcheck.hpp"
#include "radformer/image.hpp"
#include "radformer/local_branch.hpp"
#include "radformer/model.hpp"
#include "radformer/nn.hpp"
#include "radformer/ops.hpp"
#include "radformer/rng.hpp"
#include "radformer/roi.hpp"
#include "radformer/tape.hpp"
#include "radformer/tensor.hpp"
#include "radformer/trainer.hpp"
