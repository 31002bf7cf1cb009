#pragma once

#include "qkvae/errors.hpp"
#include "qkvae/tensor.hpp"
#include "qkvae/grad_check.hpp"
#include "qkvae/nn.hpp"
#include "qkvae/latent.hpp"
#include "qkvae/token_batch.hpp"
#include "qkvae/model.hpp"
#include "qkvae/tree.hpp"
#include "qkvae/data.hpp"
#include "qkvae/train.hpp"
#include "qkvae/eval.hpp"
