#pragma once

#include "lvfc/calendar.hpp"
#include "lvfc/common.hpp"
#include "lvfc/dataset.hpp"
#include "lvfc/distributions.hpp"
#include "lvfc/forecasters.hpp"
#include "lvfc/frame.hpp"
#include "lvfc/fusion.hpp"
#include "lvfc/gamlss.hpp"
#include "lvfc/kde.hpp"
#include "lvfc/pipeline.hpp"
#include "lvfc/smoothers.hpp"
#include "lvfc/synthetic.hpp"
#include "lvfc/timing.hpp"
#include "lvfc/verification.hpp"
