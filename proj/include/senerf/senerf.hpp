#pragma once

#include "senerf/autodiff.hpp"
#include "senerf/camera.hpp"
#include "senerf/distill.hpp"
#include "senerf/fields.hpp"
#include "senerf/image.hpp"
#include "senerf/metrics.hpp"
#include "senerf/optim.hpp"
#include "senerf/parallel.hpp"
#include "senerf/reliability.hpp"
#include "senerf/renderer.hpp"
#include "senerf/scene.hpp"
#include "senerf/selftrain.hpp"
