#pragma once

#include "uqseg/core.hpp"
#include "uqseg/io.hpp"
#include "uqseg/metrics.hpp"
#include "uqseg/report.hpp"
#include "uqseg/ood_scoring.hpp"
#include "uqseg/calibration.hpp"
#include "uqseg/stat_adaptation.hpp"
#include "uqseg/losses.hpp"
#include "uqseg/components.hpp"
#include "uqseg/fusion.hpp"
#include "uqseg/training_support.hpp"
#include "uqseg/weather_aug.hpp"
