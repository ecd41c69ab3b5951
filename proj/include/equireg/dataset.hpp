#pragma once

#include <string>

#include "equireg/registration.hpp"

namespace equireg {

enum class RetinaVariant { Baseline, Shift, ScaleShift };

std::string to_string(RetinaVariant v);
RetinaVariant retina_variant_from_string(const std::string& s);

struct DatasetConfig {
  RetinaVariant variant = RetinaVariant::Baseline;
  int n_train = 48;
  int n_test = 12;
  int resolution = 64;
  // elastic warps: Gaussian-smoothed random displacement fields
  float warp_sigma = 0.06f;      // smoothing length, domain units
  float warp_amplitude = 0.035f; // peak displacement, domain units
  float shift_fraction = 1.0f / 3.0f;  // of the object diameter, along +x
  float scale_factor = 0.8f;
  std::uint64_t seed = 1;
  int n_base_train = 14;  // base shapes behind the train pairs
  int n_base_test = 6;
};

struct RegPair {
  Image moving, fixed;
  Transform gt;  // ground-truth correspondence: moving o gt ~ fixed
};

struct Dataset {
  DatasetConfig cfg;
  std::vector<RegPair> train, test;
};

// Procedurally generated annulus-with-spokes masks (soft 1.5-voxel edges)
// warped by random invertible elastic fields. Shift composes the fixed image
// with a translation of shift_fraction * diameter; ScaleShift additionally
// scales it to scale_factor about the center.
Dataset generate_dataset(const DatasetConfig& cfg);

void save_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset(const std::string& dir);

// Invertible smoothed random displacement transform (test hook: the dataset's
// warp generator).
Transform random_elastic_warp(int resolution, float sigma, float amplitude, Rng& rng);

// Dice of thresholded warped moving vs fixed masks; empty-vs-empty counts 1.
double dice_score(const Image& warped_moving, const Image& fixed, float threshold = 0.5f);

struct DiceSummary {
  std::vector<double> per_pair;
  double mean = 0.0;
};
DiceSummary evaluate_dice(RegistrationAlgorithm& alg, const std::vector<RegPair>& pairs,
                          float threshold = 0.5f);

}  // namespace equireg
