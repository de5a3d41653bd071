#pragma once

#include "cgdm/datasets.hpp"
#include "cgdm/domain.hpp"
#include "cgdm/errors.hpp"
#include "cgdm/experiment.hpp"
#include "cgdm/gradcheck.hpp"
#include "cgdm/gradient_discrepancy.hpp"
#include "cgdm/log.hpp"
#include "cgdm/losses.hpp"
#include "cgdm/nn.hpp"
#include "cgdm/pseudo_labeling.hpp"
#include "cgdm/random.hpp"
#include "cgdm/tensor.hpp"
#include "cgdm/trainer.hpp"
