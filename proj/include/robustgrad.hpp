#pragma once

// Everything except robustgrad/experiment/, which additionally needs yaml-cpp.

#include "robustgrad/activation.hpp"
#include "robustgrad/attacks.hpp"
#include "robustgrad/autodiff.hpp"
#include "robustgrad/data/cifar.hpp"
#include "robustgrad/data/dataset.hpp"
#include "robustgrad/data/idx.hpp"
#include "robustgrad/data/normalization.hpp"
#include "robustgrad/data/synthetic.hpp"
#include "robustgrad/diagnostics/report.hpp"
#include "robustgrad/edges.hpp"
#include "robustgrad/errors.hpp"
#include "robustgrad/gradients.hpp"
#include "robustgrad/io.hpp"
#include "robustgrad/losses.hpp"
#include "robustgrad/nn/checkpoint.hpp"
#include "robustgrad/nn/network.hpp"
#include "robustgrad/objectives.hpp"
#include "robustgrad/ops.hpp"
#include "robustgrad/tape.hpp"
#include "robustgrad/tensor.hpp"
#include "robustgrad/training.hpp"
