#pragma once

#include "peeler/checkpoint.hpp"
#include "peeler/config.hpp"
#include "peeler/datasets.hpp"
#include "peeler/episodes.hpp"
#include "peeler/error.hpp"
#include "peeler/eval_metrics.hpp"
#include "peeler/losses.hpp"
#include "peeler/model.hpp"
#include "peeler/optim.hpp"
#include "peeler/report.hpp"
#include "peeler/rng.hpp"
#include "peeler/tensor.hpp"
#include "peeler/train.hpp"
