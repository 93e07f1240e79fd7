#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "rawshield/isp.hpp"
#include "rawshield/rng.hpp"

namespace rawshield {

/// The three shipped sensor profiles (Canon-5D-like, Nikon-D700-like,
/// Sony-Alpha-like). Mirrors data/profiles/*.json.
const std::vector<CameraProfile>& bundled_profiles();

/// Looks up a bundled profile by name; throws ProfileError when unknown.
const CameraProfile& bundled_profile(const std::string& name);

/// Configurable range for randomly drawn white-balance gains (green fixed at 1).
struct WhiteBalanceRange {
  double red_lo = 1.2, red_hi = 2.4;
  double blue_lo = 1.2, blue_hi = 2.4;
};

/// Random profile: CCM drawn uniformly from the bundled pool, red and blue
/// gains uniform in `range`, green gain 1.
CameraProfile sample_profile(CounterRng& rng, const WhiteBalanceRange& range = {});

/// {"ccm": [[...]x3], "wb_gains": [r,g,b], "gamma": 2.2, "name": optional}
CameraProfile profile_from_json(const nlohmann::json& j);
nlohmann::json profile_to_json(const CameraProfile& profile);
CameraProfile load_profile(const std::filesystem::path& path);

/// Row sums of ccm within [0.9, 1.1] (white-point sanity for shipped data).
bool preserves_white_point(const CameraProfile& profile);

}  // namespace rawshield
