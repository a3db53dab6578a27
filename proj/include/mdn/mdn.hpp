#pragma once

// Umbrella header.

#include "mdn/adam.hpp"
#include "mdn/autodiff.hpp"
#include "mdn/camera.hpp"
#include "mdn/camera_io.hpp"
#include "mdn/checkpoint.hpp"
#include "mdn/dataset_io.hpp"
#include "mdn/error.hpp"
#include "mdn/feature_io.hpp"
#include "mdn/features.hpp"
#include "mdn/geometry.hpp"
#include "mdn/gradcheck.hpp"
#include "mdn/graphnet.hpp"
#include "mdn/losses.hpp"
#include "mdn/metrics.hpp"
#include "mdn/obj_io.hpp"
#include "mdn/parallel.hpp"
#include "mdn/pipeline.hpp"
#include "mdn/render.hpp"
#include "mdn/report_io.hpp"
#include "mdn/seed.hpp"
#include "mdn/types.hpp"
