"""
Mixed task sampling on rotated moons
====================================

Builds a few episodes from three source domains and shows how the held-out
ratio moves mass between the held-out domain and the others. With
``r_ho = 1`` the sampler reduces to plain leave-one-source-out episodes.
"""

import numpy as np

from etta import MixRatioSchedule, apportion_counts, generate_synthetic_domains, sample_task_mts

##############################################################################
# Three source domains, rotated by 0, 30 and 60 degrees.

domains = generate_synthetic_domains("rotated_two_moons", 3, 300, [0, 30, 60], seed=0)
for d in domains:
    print(d.name, len(d), d.class_counts())

##############################################################################
# Counts come from largest-remainder apportionment, so they always sum to the
# requested meta-test size.

print(apportion_counts([1 / 3, 1 / 3, 1 / 3], 10))
print(apportion_counts([0.5, 0.25, 0.25], 120))

##############################################################################
# A few episodes under the default ``r_ho ~ U[0, 1]`` schedule.

rng = np.random.default_rng(0)
schedule = MixRatioSchedule.uniform(0.0, 1.0)
for _ in range(5):
    task = sample_task_mts(domains, schedule, 120, 120, rng)
    print(f"held out={task.held_out_id} r_ho={task.r_ho:.2f} "
          f"ratios={np.round(task.ratios, 2)} counts={task.counts}")

##############################################################################
# Fixing ``r_ho = 1`` puts the whole meta-test set on the held-out domain.

task = sample_task_mts(domains, MixRatioSchedule.fixed(1.0), 120, 120, rng)
print("fixed r_ho=1 counts:", task.counts)
