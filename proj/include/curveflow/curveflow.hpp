#pragma once

#include "curveflow/common.hpp"
#include "curveflow/chart.hpp"
#include "curveflow/metric.hpp"
#include "curveflow/geometry.hpp"
#include "curveflow/backgrounds.hpp"
#include "curveflow/curve.hpp"
#include "curveflow/flow.hpp"
#include "curveflow/parallel.hpp"
#include "curveflow/identity_lab.hpp"
#include "curveflow/experiments.hpp"
