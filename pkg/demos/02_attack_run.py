"""One federated run with and without the attack, then the per-monitor detection rates.

Takes about two minutes on one core.  Run: python3 demos/02_attack_run.py
"""
from ftdba.config import ExperimentConfig
from ftdba.experiments import detection_rates, false_positive_rates, run_one

cfg = ExperimentConfig()
attack = run_one(cfg, seed=0)
benign = run_one(cfg, seed=0, malicious_ratio=0.0)

print(f"malicious clients {list(attack.malicious)} of {attack.config.num_clients}")
print(f"attack  ASR {attack.final.asr:.3f}, clean accuracy {attack.final.clean_accuracy:.3f}")
print(f"benign  ASR {benign.final.asr:.3f}, clean accuracy {benign.final.clean_accuracy:.3f}")
s = attack.stealth
print(f"stealth: KL global {s.kl_global:.4f}, KL anchor {s.kl_anchor:.4f}, SSIM {s.ssim_mean:.4f}, PSNR {s.psnr_mean_db:.1f} dB")
det, fpr = detection_rates(attack), false_positive_rates(attack)
for name in det:
    print(f"{name:10s} detection {det[name]:.2f}, false positives {fpr[name]:.2f}")
