#pragma once

#include "linbp/attacks.hpp"
#include "linbp/backprop.hpp"
#include "linbp/bench.hpp"
#include "linbp/common.hpp"
#include "linbp/data.hpp"
#include "linbp/graph.hpp"
#include "linbp/model_lab.hpp"
#include "linbp/tensor.hpp"
