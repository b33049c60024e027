#ifndef MEMFCN_MEMFCN_HPP
#define MEMFCN_MEMFCN_HPP

// Umbrella header: the whole library in dependency order.

#include "memfcn/common.hpp"
#include "memfcn/half.hpp"
#include "memfcn/parallel.hpp"
#include "memfcn/rng.hpp"
#include "memfcn/tensor.hpp"
#include "memfcn/conv.hpp"
#include "memfcn/layers.hpp"
#include "memfcn/inplace_abn.hpp"
#include "memfcn/losses.hpp"
#include "memfcn/autograd.hpp"
#include "memfcn/unet.hpp"
#include "memfcn/precision.hpp"
#include "memfcn/optim.hpp"
#include "memfcn/memplan.hpp"
#include "memfcn/resample.hpp"
#include "memfcn/volio.hpp"
#include "memfcn/data.hpp"
#include "memfcn/train.hpp"
#include "memfcn/config.hpp"

#endif  // MEMFCN_MEMFCN_HPP
