// Umbrella header.
#pragma once

#include "voxseg/adam.hpp"
#include "voxseg/arch_spec.hpp"
#include "voxseg/categories.hpp"
#include "voxseg/checkpoint.hpp"
#include "voxseg/dilation.hpp"
#include "voxseg/gradcheck.hpp"
#include "voxseg/layers.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/model.hpp"
#include "voxseg/ops.hpp"
#include "voxseg/part_features.hpp"
#include "voxseg/synth.hpp"
#include "voxseg/tensor.hpp"
#include "voxseg/threads.hpp"
#include "voxseg/trainer.hpp"
#include "voxseg/voxel.hpp"
