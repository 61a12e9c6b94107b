#pragma once

#include "seamless/backbone.hpp"
#include "seamless/cdp.hpp"
#include "seamless/checkpoint.hpp"
#include "seamless/config.hpp"
#include "seamless/data_pipeline.hpp"
#include "seamless/engine.hpp"
#include "seamless/igc_decoder.hpp"
#include "seamless/image_io.hpp"
#include "seamless/losses.hpp"
#include "seamless/metrics.hpp"
#include "seamless/model.hpp"
#include "seamless/optim.hpp"
#include "seamless/pseudo_labels.hpp"
