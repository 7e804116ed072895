#pragma once

#include "infrank/error.hpp"
#include "infrank/random.hpp"
#include "infrank/dataset.hpp"
#include "infrank/classifier.hpp"
#include "infrank/influence.hpp"
#include "infrank/scores.hpp"
#include "infrank/posttrain.hpp"
