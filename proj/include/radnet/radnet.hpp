#pragma once

#include "radnet/checkpoint.hpp"
#include "radnet/dataset.hpp"
#include "radnet/errors.hpp"
#include "radnet/gradcam.hpp"
#include "radnet/gradient_check.hpp"
#include "radnet/image_io.hpp"
#include "radnet/layers.hpp"
#include "radnet/loss.hpp"
#include "radnet/metrics.hpp"
#include "radnet/model.hpp"
#include "radnet/optimizer.hpp"
#include "radnet/tensor.hpp"
#include "radnet/trainer.hpp"
