#pragma once

#include "crosswatch/autodiff.hpp"
#include "crosswatch/behavior_model.hpp"
#include "crosswatch/checkpoint.hpp"
#include "crosswatch/data_model.hpp"
#include "crosswatch/gradcheck.hpp"
#include "crosswatch/io.hpp"
#include "crosswatch/layers.hpp"
#include "crosswatch/metrics.hpp"
#include "crosswatch/parallel.hpp"
#include "crosswatch/relation_net.hpp"
#include "crosswatch/synthetic.hpp"
#include "crosswatch/training.hpp"
