#pragma once

#include "quadrank/core.hpp"
#include "quadrank/image.hpp"
#include "quadrank/geometry.hpp"
#include "quadrank/rankloss.hpp"
#include "quadrank/model.hpp"
#include "quadrank/adadelta.hpp"
#include "quadrank/model_io.hpp"
#include "quadrank/quadgen.hpp"
#include "quadrank/detector.hpp"
#include "quadrank/evaluator.hpp"
#include "quadrank/fixtures.hpp"
#include "quadrank/trainer.hpp"
