#include "rawshield/profiles.hpp"

#include <fstream>

namespace rawshield {

namespace {

CameraProfile make_bundled(const char* name, std::initializer_list<double> ccm_rows,
                           const Eigen::Vector3d& gains) {
  Eigen::Matrix3d ccm;
  auto it = ccm_rows.begin();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) ccm(r, c) = *it++;
  return CameraProfile::make(name, ccm, gains, 2.2);
}

}  // namespace

const std::vector<CameraProfile>& bundled_profiles() {
  // Camera→sRGB matrices obtained by inverting row-normalized XYZ→camera
  // matrices composed with the sRGB primaries. Gains are typical daylight
  // values; both are configuration.
  static const std::vector<CameraProfile> profiles = {
      make_bundled("canon_5d_like",
                   {1.262272, -0.457958, 0.195686,  //
                    -0.1505, 1.133467, 0.017033,    //
                    -0.010644, -0.362345, 1.372989},
                   {2.0, 1.0, 1.6}),
      make_bundled("nikon_d700_like",
                   {1.705489, -0.532387, -0.173102,  //
                    -0.292151, 1.816804, -0.524653,  //
                    0.032218, -0.493346, 1.461128},
                   {1.9, 1.0, 1.5}),
      make_bundled("sony_alpha_like",
                   {1.634243, -0.437328, -0.196914,  //
                    -0.183886, 1.502407, -0.31852,   //
                    0.040786, -0.429707, 1.388921},
                   {2.2, 1.0, 1.7}),
  };
  return profiles;
}

const CameraProfile& bundled_profile(const std::string& name) {
  for (const auto& p : bundled_profiles())
    if (p.name == name) return p;
  throw ProfileError("unknown bundled profile '" + name + "'");
}

CameraProfile sample_profile(CounterRng& rng, const WhiteBalanceRange& range) {
  const auto& pool = bundled_profiles();
  const auto index = static_cast<std::size_t>(rng() % pool.size());
  const CameraProfile& base = pool[index];
  const Eigen::Vector3d gains(rng.uniform(range.red_lo, range.red_hi), 1.0,
                              rng.uniform(range.blue_lo, range.blue_hi));
  CameraProfile p = base;
  p.wb_gains = gains;
  return p;
}

CameraProfile profile_from_json(const nlohmann::json& j) {
  try {
    const auto& rows = j.at("ccm");
    if (!rows.is_array() || rows.size() != 3) throw ProfileError("profile: ccm must be 3x3");
    Eigen::Matrix3d ccm;
    for (int r = 0; r < 3; ++r) {
      if (!rows[r].is_array() || rows[r].size() != 3) throw ProfileError("profile: ccm must be 3x3");
      for (int c = 0; c < 3; ++c) ccm(r, c) = rows[r][c].get<double>();
    }
    const auto& g = j.at("wb_gains");
    if (!g.is_array() || g.size() != 3) throw ProfileError("profile: wb_gains must have 3 entries");
    const Eigen::Vector3d gains(g[0].get<double>(), g[1].get<double>(), g[2].get<double>());
    return CameraProfile::make(j.value("name", std::string("custom")), ccm, gains,
                               j.value("gamma", 2.2));
  } catch (const nlohmann::json::exception& e) {
    throw ProfileError(std::string("profile: ") + e.what());
  }
}

nlohmann::json profile_to_json(const CameraProfile& profile) {
  nlohmann::json ccm = nlohmann::json::array();
  for (int r = 0; r < 3; ++r)
    ccm.push_back({profile.ccm(r, 0), profile.ccm(r, 1), profile.ccm(r, 2)});
  return {{"name", profile.name},
          {"ccm", ccm},
          {"wb_gains", {profile.wb_gains[0], profile.wb_gains[1], profile.wb_gains[2]}},
          {"gamma", profile.gamma}};
}

CameraProfile load_profile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open profile " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ProfileError("profile " + path.string() + ": " + e.what());
  }
  return profile_from_json(j);
}

bool preserves_white_point(const CameraProfile& profile) {
  const Eigen::Vector3d sums = profile.ccm.rowwise().sum();
  return (sums.array() >= 0.9).all() && (sums.array() <= 1.1).all();
}

}  // namespace rawshield
