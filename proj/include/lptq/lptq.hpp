// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "lptq/error.hpp"
#include "lptq/tensor.hpp"
#include "lptq/random.hpp"
#include "lptq/quant.hpp"
#include "lptq/calib.hpp"
#include "lptq/nn/conv.hpp"
#include "lptq/nn/network.hpp"
#include "lptq/nn/adam.hpp"
#include "lptq/nn/model_io.hpp"
#include "lptq/detector.hpp"
#include "lptq/tgpl.hpp"
#include "lptq/scene.hpp"
#include "lptq/eval.hpp"
#include "lptq/pipeline.hpp"
#include "lptq/config.hpp"
