#pragma once

#include "splatpatch/bench.hpp"
#include "splatpatch/camera.hpp"
#include "splatpatch/error.hpp"
#include "splatpatch/gaussians.hpp"
#include "splatpatch/geometry.hpp"
#include "splatpatch/gradcheck.hpp"
#include "splatpatch/image.hpp"
#include "splatpatch/io.hpp"
#include "splatpatch/metrics.hpp"
#include "splatpatch/network.hpp"
#include "splatpatch/parallel.hpp"
#include "splatpatch/pipeline.hpp"
#include "splatpatch/rasterizer.hpp"
#include "splatpatch/synth.hpp"
