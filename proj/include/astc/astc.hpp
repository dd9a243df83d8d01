#pragma once

#include "astc/agent.hpp"
#include "astc/belief_model.hpp"
#include "astc/bounded_tree.hpp"
#include "astc/common.hpp"
#include "astc/config.hpp"
#include "astc/episode_store.hpp"
#include "astc/evaluation.hpp"
#include "astc/gmm.hpp"
#include "astc/pipeline.hpp"
#include "astc/svg_plot.hpp"
#include "astc/synth_env.hpp"
#include "astc/text_io.hpp"
