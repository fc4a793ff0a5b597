from dataclasses import astuple, fields

from nsn.data_io import write_csv
from nsn.decorators import command_errors
from nsn.experiments import AblationRow, AblationRun, ablation_table

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Compare training objectives: highest-rank, avg ID and avg OOD accuracy per mode over seeds.'

    @command_errors
    def handle(self, *args, **options):
        config = self.setup(options)
        out = self.output_dir(options, config)
        rows, runs = ablation_table(config)

        write_csv(out / 'ablation.csv', [f.name for f in fields(AblationRow)], (astuple(r) for r in rows))
        write_csv(out / 'ablation_runs.csv', [f.name for f in fields(AblationRun)], (astuple(r) for r in runs))
        for row in rows:
            self.stdout.write(
                f'  {row.mode:<22} highest {row.highest_mean:.4f}  ID {row.avg_id_mean:.4f}  OOD {row.avg_ood_mean:.4f}'
            )
        self.success(f'Ablation over {len(rows)} modes and {len(config.ablation["seeds"])} seeds written to {out}')
