#pragma once

#include "styledem/bundle.hpp"
#include "styledem/dataset.hpp"
#include "styledem/error.hpp"
#include "styledem/feature_size.hpp"
#include "styledem/heightfield.hpp"
#include "styledem/heightfield_io.hpp"
#include "styledem/hydrology.hpp"
#include "styledem/latent.hpp"
#include "styledem/networks.hpp"
#include "styledem/superres.hpp"
#include "styledem/toolbox.hpp"
#include "styledem/training.hpp"
