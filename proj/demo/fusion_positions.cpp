// Trains the three streams on a small phantom set, then fuses them early, midway and late and
// compares each fused model with the one-to-one and many-to-one streams on held-out slices.
//
//   fusion_positions [epochs] [image_size]

#include <cstdio>
#include <cstdlib>

#include "mustgan/mustgan.hpp"

using namespace mustgan;

int main(int argc, char** argv) {
  const std::size_t epochs = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 8;
  const std::size_t size = argc > 2 ? std::strtoul(argv[2], nullptr, 10) : 32;

  PhantomSpec data;
  data.image_size = size;
  data.n_subjects = 4;
  data.slices_per_subject = 4;
  auto ds = generate_phantoms(data, 11);
  assign_splits(ds, {3, 1, 0});
  const auto roles = resolve_roles(ds.spec, {});
  const auto train = make_training_set<float>(ds.split("train"), roles);

  GeneratorSpec gen;
  gen.n_residual = 3;
  gen.base_channels = 8;
  DiscriminatorSpec disc;
  disc.n_layers = 3;
  disc.base_channels = 8;

  MultiStreamModel<float> streams(2, gen, disc, 11);
  TrainConfig phase1;
  phase1.epochs = epochs;
  phase1.seed = 11;
  std::printf("phase 1: %zu streams, %zu epochs on %zu slices of %zux%zu\n", streams.K() + 1, epochs, train.size(),
              size, size);
  StreamTrainer<float>(streams, phase1).run(train);

  std::vector<std::pair<std::string, Synthesizer>> synths = {
      {"one-to-one (A)", model_synthesizer(streams, roles, "stream1")},
      {"one-to-one (B)", model_synthesizer(streams, roles, "stream2")},
      {"many-to-one", model_synthesizer(streams, roles, "stream3")}};
  std::vector<MultiStreamModel<float>> fused;
  fused.reserve(3);
  const std::size_t L = gen.total_layers();
  for (std::size_t i : {std::size_t(1), gen.n_encoder + 2, L - 1}) {
    auto m = clone_model(streams);
    m.attach_joint(i, 11);
    TrainConfig phase2 = default_joint_config();
    phase2.epochs = epochs;
    phase2.seed = 11;
    std::printf("phase 2: fusion after layer %zu of %zu (%s)\n", i, L, to_string(m.fusion().regime));
    train_joint(m, train, phase2);
    fused.push_back(std::move(m));
    synths.emplace_back("mustGAN i=" + std::to_string(i), model_synthesizer(fused.back(), roles, "mustgan"));
  }

  const auto report = evaluate(synths, ds.split("val"), roles, "val");
  std::printf("\n");
  for (const auto& m : report.models)
    std::printf("%-16s PSNR %6.2f dB   SSIM %.3f\n", m.name.c_str(), m.psnr_slices.mean, m.ssim_slices.mean);
  return 0;
}
