#pragma once

#include "bits.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "core.hpp"
#include "datagen.hpp"
#include "decoding.hpp"
#include "error.hpp"
#include "image_units.hpp"
#include "manifest.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "quantizer.hpp"
#include "random.hpp"
#include "training.hpp"
